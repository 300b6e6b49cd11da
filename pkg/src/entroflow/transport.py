"""Transport couples and convective calculus on analytic velocity fields.

Velocity fields are symbolic (polynomial/trigonometric in space, polynomial in
time), so iterated convective derivatives propagate in closed form.  Three
field backends share one contract (values and Jacobians at points): symbolic
tensor fields, Newton-inverted geodesic fields, and diagram-valued fields for
the heat flow whose time derivative is the exact derivation induced by the
heat equation on log-density diagrams.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import fsum

import numpy as np
import sympy
from scipy.integrate import solve_ivp

from entroflow.bell import bell_apply, bell_polynomial
from entroflow.density import (
    DensityError,
    build_grid,
    check_grid,
    heat_evolve,
    logU_derivatives,
    mu_derivatives,
)
from entroflow.diagram import (
    DiagramExpr,
    Multigraph,
    contract,
    grad,
    lambda_scalar,
    multiply,
    u_node,
    u_scalar,
)
from entroflow.evaluator import PressureFamily, eval_expr_at
from entroflow.fd import fd_derivative, fd_derivative_from_samples, lattice_offsets

T_SYM = sympy.Symbol("t")
X_SYMS = (sympy.Symbol("x0"), sympy.Symbol("x1"))

MAX_SPATIAL_ORDER = 6
MAX_TIME_ORDER = 5


class TransportError(ValueError):
    pass


@lru_cache(maxsize=None)
def _lambdified(expr_key, dim):
    expr = sympy.sympify(expr_key)
    return sympy.lambdify((T_SYM,) + X_SYMS[:dim], expr, modules="numpy")


def _eval_expr(expr, t, pts):
    f = _lambdified(sympy.srepr(expr), pts.shape[1])
    vals = f(t, *(pts[:, i] for i in range(pts.shape[1])))
    return np.broadcast_to(np.asarray(vals, dtype=float), (pts.shape[0],)).copy()


def _pts(x, dim):
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if dim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr


# -- symbolic tensor fields ----------------------------------------------------

class SymTensorField:
    """Time-dependent tensor field with sympy components; rank 0 is a scalar
    field, rank 1 a vector field, etc.  Closed under gradients, products and
    convective derivatives, so towers of those stay exact."""

    def __init__(self, dim, rank, comps):
        self.dim = dim
        self.rank = rank
        self.comps = {idx: sympy.sympify(e) for idx, e in comps.items()}

    @staticmethod
    def scalar(dim, expr) -> "SymTensorField":
        return SymTensorField(dim, 0, {(): expr})

    def component(self, idx):
        return self.comps.get(tuple(idx), sympy.Integer(0))

    def value(self, t, x) -> np.ndarray:
        pts = _pts(x, self.dim)
        out = np.zeros((len(pts),) + (self.dim,) * self.rank)
        for idx in itertools.product(range(self.dim), repeat=self.rank):
            out[(slice(None),) + idx] = _eval_expr(self.component(idx), t, pts)
        return out

    def grad(self) -> "SymTensorField":
        # new derivative index comes first: (grad g)_{i, jk...}
        comps = {}
        for idx in itertools.product(range(self.dim), repeat=self.rank):
            e = self.component(idx)
            for i in range(self.dim):
                comps[(i,) + idx] = sympy.diff(e, X_SYMS[i])
        return SymTensorField(self.dim, self.rank + 1, comps)

    def jacobian(self, t, x) -> np.ndarray:
        if self.rank != 1:
            raise TransportError("jacobian is defined for vector fields")
        return self.grad().value(t, x)

    def cD(self, phi: "VelocityField") -> "SymTensorField":
        comps = {}
        for idx in itertools.product(range(self.dim), repeat=self.rank):
            e = self.component(idx)
            out = sympy.diff(e, T_SYM)
            for i in range(self.dim):
                out = out + phi.comps[i] * sympy.diff(e, X_SYMS[i])
            comps[idx] = out
        return SymTensorField(self.dim, self.rank, comps)

    def times(self, other: "SymTensorField") -> "SymTensorField":
        if self.rank != 0 or other.rank != 0:
            raise TransportError("pointwise product helper is for scalar fields")
        return SymTensorField.scalar(self.dim, self.comps[()] * other.comps[()])

    @property
    def is_zero(self) -> bool:
        return all(sympy.simplify(e) == 0 for e in self.comps.values())


@dataclass(frozen=True)
class VelocityField:
    """Smooth velocity field with closed-form mixed derivatives: components are
    sympy expressions in (t, x0[, x1]) built from monomials (degree <= 4 per
    axis), sin/cos waves, and polynomial-in-t coefficients."""

    dim: int
    comps: tuple

    def __post_init__(self):
        if self.dim not in (1, 2) or len(self.comps) != self.dim:
            raise TransportError("velocity field needs dim in {1, 2} matching components")

    @staticmethod
    def from_exprs(dim, exprs) -> "VelocityField":
        return VelocityField(dim, tuple(sympy.sympify(e) for e in exprs))

    @staticmethod
    def from_config(cfg: dict) -> "VelocityField":
        dim = int(cfg["dim"])
        comps = []
        for comp_terms in cfg["components"]:
            total = sympy.Integer(0)
            for term in comp_terms:
                e = sympy.Float(term["coeff"])
                for axis, p in enumerate(term.get("powers", [0] * dim)):
                    e = e * X_SYMS[axis] ** int(p)
                trig = term.get("trig")
                if trig:
                    fn = {"sin": sympy.sin, "cos": sympy.cos}[trig["fn"]]
                    e = e * fn(sympy.Float(trig["omega"]) * X_SYMS[int(trig.get("axis", 0))])
                tp = term.get("time_poly")
                if tp:
                    e = e * sum(sympy.Float(c) * T_SYM**j for j, c in enumerate(tp))
                total = total + e
            comps.append(total)
        return VelocityField(dim, tuple(comps))

    @property
    def is_time_independent(self) -> bool:
        return all(T_SYM not in e.free_symbols for e in self.comps)

    def as_field(self) -> SymTensorField:
        return SymTensorField(self.dim, 1, {(i,): e for i, e in enumerate(self.comps)})

    def value(self, t, x) -> np.ndarray:
        return self.as_field().value(t, x)

    def jacobian(self, t, x) -> np.ndarray:
        return self.as_field().jacobian(t, x)


@dataclass(frozen=True)
class Potential:
    """Reference potential V with closed-form derivative tensors."""

    dim: int
    expr: sympy.Expr

    @staticmethod
    def zero(dim) -> "Potential":
        return Potential(dim, sympy.Integer(0))

    @staticmethod
    def from_expr(dim, expr) -> "Potential":
        return Potential(dim, sympy.sympify(expr))

    def value(self, x) -> np.ndarray:
        pts = _pts(x, self.dim)
        return _eval_expr(self.expr, 0.0, pts)

    def tensor(self, k, x) -> np.ndarray:
        pts = _pts(x, self.dim)
        out = np.zeros((len(pts),) + (self.dim,) * k)
        for idx in itertools.product(range(self.dim), repeat=k):
            e = self.expr
            for i in idx:
                e = sympy.diff(e, X_SYMS[i])
            out[(slice(None),) + idx] = _eval_expr(e, 0.0, pts)
        return out


# -- convective-derivative operations ------------------------------------------

def convective_derivative(g, phi):
    """Material derivative along phi: time derivative plus advection.  The
    result is a field oracle of the same kind and rank, so applications nest."""
    return g.cD(phi)


def iterated_cD(phi, n: int):
    """n-th convective derivative of the velocity field along itself."""
    if n < 0 or n > 4:
        raise TransportError("iterated convective derivatives supported up to order 4")
    fields = cD_tower(phi, n)
    return fields[n]


def cD_tower(phi, n: int):
    """[phi, cD phi, ..., cD^n phi] as field oracles."""
    if isinstance(phi, VelocityField):
        current = phi.as_field()
        tower = [current]
        for _ in range(n):
            current = current.cD(phi)
            tower.append(current)
        return tower
    # fields with their own tower rule (geodesic, zero, heat-flow)
    tower = [phi]
    for _ in range(n):
        tower.append(tower[-1].cD(phi))
    return tower


def lambda_n(fields, V: Potential | None, t, x) -> np.ndarray:
    """Symmetrized trace-chain of the fields' Jacobians with sign (-1)^n, plus
    the potential pairing; equal arguments reduce to (n-1)! times the single
    trace of the Jacobian power."""
    n = len(fields)
    if n < 1 or n > 5:
        raise TransportError("operator order must lie in [1, 5]")
    jacs = [f.jacobian(t, x) for f in fields]
    npts = jacs[0].shape[0]
    acc = np.zeros(npts)
    for order in itertools.permutations(range(n)):
        prod = jacs[order[0]]
        for k in order[1:]:
            prod = np.einsum("qab,qbc->qac", prod, jacs[k])
        acc += np.einsum("qaa->q", prod)
    out = ((-1) ** n / float(n)) * acc
    if V is not None and V.expr != 0:
        vt = V.tensor(n, x)
        vals = [f.value(t, x) for f in fields]
        letters = "abcde"[:n]
        spec = "q" + letters + "," + ",".join("q" + c for c in letters) + "->q"
        out = out + np.einsum(spec, vt, *vals)
    return out


# -- geodesic transport --------------------------------------------------------

@dataclass
class ConvectiveGeodesic:
    """Straight-line mass transport: the map x + t*v(x) pushes the initial
    density forward, and the induced velocity field has vanishing convective
    derivative on the validity window."""

    mu0: object
    v: VelocityField
    t_star: float = field(init=False)

    def __post_init__(self):
        if not self.v.is_time_independent:
            raise TransportError("convective geodesics use a time-independent field")
        if self.v.dim != self.mu0.dim:
            raise TransportError("dimension mismatch between density and field")
        self.t_star = self._validity_window()

    def _validity_window(self) -> float:
        grid = build_grid(self.mu0, 1e-6)
        jac = self.v.jacobian(0.0, grid.points)
        t_max = math.inf
        for i in range(self.v.dim):
            slopes = jac[:, i, i]
            neg = slopes[slopes < 0]
            if len(neg):
                t_max = min(t_max, 0.9 / float(np.max(-neg)))
        return t_max if t_max < math.inf else 1e6

    def transport_map(self, t, x) -> np.ndarray:
        pts = _pts(x, self.v.dim)
        return pts + t * self.v.value(0.0, pts)

    def map_jacobian_diag(self, t, x) -> np.ndarray:
        # diagonal of I + t grad(v); valid because supported fields are
        # one-dimensional or diagonal in d = 2
        pts = _pts(x, self.v.dim)
        jac = self.v.jacobian(0.0, pts)
        return 1.0 + t * np.stack([jac[:, i, i] for i in range(self.v.dim)], axis=1)

    def invert_map(self, t, y, tol=1e-12, max_iter=60) -> np.ndarray:
        pts = _pts(y, self.v.dim)
        if abs(t) >= self.t_star:
            raise TransportError("time outside the injectivity window")
        x = pts.copy()
        for _ in range(max_iter):
            resid = x + t * self.v.value(0.0, x) - pts
            slope = self.map_jacobian_diag(t, x)
            x = x - resid / slope
            if float(np.max(np.abs(resid))) < tol:
                return x
        raise TransportError("transport-map inversion did not converge")

    def velocity_at(self, t, y) -> np.ndarray:
        """The admissible velocity field of the pushforward curve, evaluated by
        inverting the transport map."""
        return self.v.value(0.0, self.invert_map(t, y))

    def field(self) -> "GeodesicField":
        return GeodesicField(self)


class ZeroField:
    """Identically-zero vector field; absorbing under convective derivatives."""

    def __init__(self, dim):
        self.dim = dim
        self.rank = 1
        self.is_zero = True

    def value(self, t, x) -> np.ndarray:
        return np.zeros((len(_pts(x, self.dim)), self.dim))

    def jacobian(self, t, x) -> np.ndarray:
        return np.zeros((len(_pts(x, self.dim)), self.dim, self.dim))

    def cD(self, phi) -> "ZeroField":
        return self


class GeodesicField:
    """Velocity-field oracle of a convective geodesic; its convective
    derivative along itself vanishes identically, so the tower truncates."""

    def __init__(self, geo: ConvectiveGeodesic):
        self.geo = geo
        self.dim = geo.v.dim
        self.rank = 1

    def value(self, t, x) -> np.ndarray:
        return self.geo.velocity_at(t, x)

    def jacobian(self, t, x) -> np.ndarray:
        # grad of v(inverse map): chain rule through the diagonal inverse Jacobian
        xs = self.geo.invert_map(t, x)
        jac_v = self.geo.v.jacobian(0.0, xs)
        slope = self.geo.map_jacobian_diag(t, xs)
        return jac_v / slope[:, :, None]

    def cD(self, phi) -> ZeroField:
        return ZeroField(self.dim)


def pushforward_density(geo: ConvectiveGeodesic, t, y, order: int = 4):
    """Density value and log-density derivatives (orders 0..order) of the
    geodesic pushforward at points y, by Newton inversion and exact chain
    rules through the inverse map.  One-dimensional, or two-dimensional with a
    diagonal field."""
    if order > 4:
        raise TransportError("pushforward derivatives supported up to order 4")
    dim = geo.v.dim
    pts = _pts(y, dim)
    if dim == 2 and not _is_diagonal(geo.v):
        raise TransportError("two-dimensional pushforward needs a diagonal field")
    x = geo.invert_map(t, pts)
    # per-axis inverse-map derivatives G^(k) via triangular Bell inversion
    inv_derivs = []
    for axis in range(dim):
        vi = geo.v.comps[axis]
        fprimes = [1.0 + t * _eval_expr(sympy.diff(vi, X_SYMS[axis]), 0.0, x)]
        for k in range(2, order + 2):
            fprimes.append(t * _eval_expr(sympy.diff(vi, X_SYMS[axis], k), 0.0, x))
        inv_derivs.append(_inverse_derivatives(fprimes, order + 1))
    u0 = logU_derivatives(geo.mu0, x, order)
    # log Jacobian term: log(1 + t v_i'(x_i)) per axis, derivatives in x
    logj_x = []
    for axis in range(dim):
        vi = geo.v.comps[axis]
        lj = sympy.log(1 + T_SYM * sympy.diff(vi, X_SYMS[axis]))
        derivs = []
        for k in range(order + 1):
            e = sympy.diff(lj, X_SYMS[axis], k).subs(T_SYM, t)
            derivs.append(_eval_expr(e, 0.0, x))
        logj_x.append(derivs)
    u_out = _chain_log_density(u0, logj_x, inv_derivs, order, dim)
    mu_val = np.exp(u_out[0])
    return mu_val, u_out


def _is_diagonal(v: VelocityField) -> bool:
    return all(
        all(not v.comps[i].has(X_SYMS[j]) for j in range(v.dim) if j != i)
        for i in range(v.dim)
    )


def _inverse_derivatives(fprimes, K):
    """Derivatives of the inverse function from derivatives of the forward one
    (arrays over points): triangular solve of the composed chain rule."""
    gs = [None, 1.0 / fprimes[0]]
    for k in range(2, K + 1):
        acc = np.zeros_like(fprimes[0])
        for j in range(2, k + 1):
            poly = bell_polynomial(k, j)
            args = [gs[i] if i < len(gs) else np.zeros_like(fprimes[0])
                    for i in range(1, k - j + 2)]
            term = bell_apply(poly, args,
                              product=lambda a, b: a * b,
                              scale=lambda c, e: c * e,
                              add=lambda a, b: a + b,
                              zero=np.zeros_like(fprimes[0]))
            acc = acc + (fprimes[j - 1] if j - 1 < len(fprimes) else 0.0) * term
        gs.append(-acc / fprimes[0])
    return gs


def _compose_scalar_derivs(outer, inner, K):
    """d^k/dy^k of f(g(y)) from outer derivatives f^(j) at g(y) and inner
    derivatives g^(j), via the univariate chain rule."""
    out = [outer[0]]
    for k in range(1, K + 1):
        acc = np.zeros_like(outer[0])
        for j in range(1, k + 1):
            poly = bell_polynomial(k, j)
            args = [inner[i] if i < len(inner) else np.zeros_like(outer[0])
                    for i in range(1, k - j + 2)]
            term = bell_apply(poly, args,
                              product=lambda a, b: a * b,
                              scale=lambda c, e: c * e,
                              add=lambda a, b: a + b,
                              zero=np.zeros_like(outer[0]))
            acc = acc + outer[j] * term
        out.append(acc)
    return out


def _chain_log_density(u0, logj_x, inv_derivs, order, dim):
    """Log-density derivative tensors of the pushforward, from base tensors,
    per-axis log-Jacobian derivatives, and inverse-map derivatives."""
    npts = u0.tensors[0].shape[0]
    if dim == 1:
        outer = [u0.tensors[k].reshape(npts) for k in range(order + 1)]
        u_comp = _compose_scalar_derivs(outer, inv_derivs[0], order)
        lj_comp = _compose_scalar_derivs(logj_x[0], inv_derivs[0], order)
        out = [u_comp[k] - lj_comp[k] for k in range(order + 1)]
        return [v.reshape((npts,) + (1,) * k) for k, v in enumerate(out)]
    # d = 2, diagonal map: mixed partials via per-axis Bell factors
    tensors = []
    for k in range(order + 1):
        out = np.zeros((npts,) + (2,) * k)
        for idx in itertools.product(range(2), repeat=k):
            a = idx.count(0)
            b = idx.count(1)
            val = np.zeros(npts)
            for j1 in range(0, a + 1):
                for j2 in range(0, b + 1):
                    B1 = _bell_value(a, j1, inv_derivs[0], npts)
                    B2 = _bell_value(b, j2, inv_derivs[1], npts)
                    base = u0.tensors[j1 + j2]
                    sl = (slice(None),) + (0,) * j1 + (1,) * j2
                    val = val + base[sl] * B1 * B2
            # separable log-Jacobian corrections live on the pure-axis entries
            if k >= 1 and all(i == 0 for i in idx):
                val = val - _compose_scalar_derivs(logj_x[0], inv_derivs[0], k)[k]
            if k >= 1 and all(i == 1 for i in idx):
                val = val - _compose_scalar_derivs(logj_x[1], inv_derivs[1], k)[k]
            out[(slice(None),) + idx] = val
        if k == 0:
            out = out - logj_x[0][0] - logj_x[1][0]
        tensors.append(out)
    return tensors


def _bell_value(n, k, inner, npts):
    if n == 0 and k == 0:
        return np.ones(npts)
    poly = bell_polynomial(n, k)
    if poly.is_zero:
        return np.zeros(npts)
    args = [inner[i] if i < len(inner) else np.zeros(npts) for i in range(1, n - k + 2)]
    return bell_apply(poly, args,
                      product=lambda a, b: a * b,
                      scale=lambda c, e: c * e,
                      add=lambda a, b: a + b,
                      zero=np.zeros(npts))


# -- heat-flow diagram fields ----------------------------------------------------

def heat_time_derivative(expr: DiagramExpr) -> DiagramExpr:
    """Exact time derivative of a log-density diagram along the heat flow: each
    node in turn is replaced by its evolution (a traced second derivative plus
    the Leibniz split of a squared-gradient pair)."""
    total = DiagramExpr.zero(expr.dangling_labels)
    for mg, coeff in expr.terms:
        for v in range(mg.node_count):
            # traced-second-derivative part: one extra self-loop on v
            looped = Multigraph.make(mg.node_count, list(mg.edges) + [(v, v)], mg.dangling)
            total = total + DiagramExpr.from_terms(expr.dangling_labels, {looped: coeff})
            # squared-gradient part: distribute v's attachment slots over two
            # nodes joined by a fresh contracted edge
            slots = []
            for e_idx, (a, b) in enumerate(mg.edges):
                if a == v:
                    slots.append(("e", e_idx, 0))
                if b == v:
                    slots.append(("e", e_idx, 1))
            for d_idx, (node, _lab) in enumerate(mg.dangling):
                if node == v:
                    slots.append(("d", d_idx, 0))
            for bits in itertools.product((0, 1), repeat=len(slots)):
                w = mg.node_count  # the split-off twin node
                new_edges = []
                for e_idx, (a, b) in enumerate(mg.edges):
                    na, nb = a, b
                    for s, bit in zip(slots, bits):
                        if s[0] == "e" and s[1] == e_idx:
                            if s[2] == 0 and bit:
                                na = w
                            if s[2] == 1 and bit:
                                nb = w
                    new_edges.append((na, nb))
                new_edges.append((v, w))
                new_dang = []
                for d_idx, (node, lab) in enumerate(mg.dangling):
                    nn = node
                    for s, bit in zip(slots, bits):
                        if s[0] == "d" and s[1] == d_idx and bit:
                            nn = w
                    new_dang.append((nn, lab))
                g = Multigraph.make(mg.node_count + 1, new_edges, new_dang)
                total = total + DiagramExpr.from_terms(expr.dangling_labels, {g: coeff})
    return total


class HeatFlowField:
    """The heat-flow velocity field (minus the log-density gradient) and its
    convective-derivative tower, represented exactly as diagram expressions and
    evaluated against the evolved density."""

    def __init__(self, base_model, expr: DiagramExpr | None = None, label: str = "i"):
        self.base_model = base_model
        self.label = label
        self.expr = expr if expr is not None else u_node(label).scale(-1)
        self.dim = base_model.dim
        self.rank = 1

    def _stack(self, t, x, need):
        model = heat_evolve(self.base_model, t) if t > 0 else self.base_model
        return logU_derivatives(model, x, need)

    def value(self, t, x) -> np.ndarray:
        stack = self._stack(t, x, self.expr.max_degree())
        return eval_expr_at(self.expr, stack)

    def jacobian(self, t, x) -> np.ndarray:
        g = grad(self.expr, "@@jac")  # sorts before any user label
        stack = self._stack(t, x, g.max_degree())
        return eval_expr_at(g, stack)

    def cD(self, phi=None) -> "HeatFlowField":
        advect = contract(
            multiply(grad(self.expr, "@gd"), u_node("@ph").scale(-1)), "@gd", "@ph"
        )
        return HeatFlowField(self.base_model, heat_time_derivative(self.expr) + advect,
                             self.label)


@dataclass
class HeatFlowCouple:
    """The canonical transport couple of the heat flow: densities evolve by the
    heat equation and the velocity field is minus the log-density gradient."""

    base: object

    def field(self) -> HeatFlowField:
        return HeatFlowField(self.base)


def cD_logrho_pointwise(couple, V: Potential | None, n: int, t, x):
    """Pointwise order-n convective derivative of the log relative density,
    assembled as the Bell-polynomial pairing of the trace-chain operators with
    the convective tower of the velocity field.

    Heat-flow couples return (assembled values, assembled DiagramExpr, direct
    DiagramExpr) so the identity can also be checked symbolically; geodesic or
    symbolic couples return the assembled values array.
    """
    if n < 1 or n > 4:
        raise TransportError("pointwise expansions supported up to order 4")
    if isinstance(couple, HeatFlowCouple):
        if V is not None and V.expr != 0:
            raise TransportError("heat-flow route uses the Lebesgue reference")
        phi = couple.field()
        tower = [phi.expr]
        f = phi
        for _ in range(n - 1):
            f = f.cD()
            tower.append(f.expr)
        assembled = _bell_lambda_diagrams(tower, n)
        direct = u_scalar()
        for _ in range(n):
            direct = _heat_cD_scalar(direct)
        model = heat_evolve(couple.base, t) if t > 0 else couple.base
        stack = logU_derivatives(model, x, max(assembled.max_degree(), 1))
        return eval_expr_at(assembled, stack), assembled, direct
    if isinstance(couple, ConvectiveGeodesic):
        fields = cD_tower(couple.field(), n - 1)
    elif isinstance(couple, VelocityField):
        fields = cD_tower(couple, n - 1)
    else:
        raise TransportError("pointwise expansion supports heat-flow, geodesic, and "
                             "symbolic-velocity couples")
    total = None
    for k in range(1, n + 1):
        for mono in bell_polynomial(n, k):
            group = []
            for i, h in mono.exponents.counts:
                group.extend([fields[i - 1]] * h)
            vals = lambda_n(group, V, t, x) * mono.coefficient
            total = vals if total is None else total + vals
    return total


def _heat_cD_scalar(expr: DiagramExpr) -> DiagramExpr:
    advect = contract(multiply(grad(expr, "@gd"), u_node("@ph").scale(-1)), "@gd", "@ph")
    return heat_time_derivative(expr) + advect


def _bell_lambda_diagrams(tower, n) -> DiagramExpr:
    total = DiagramExpr.zero([])
    for k in range(1, n + 1):
        for mono in bell_polynomial(n, k):
            group = []
            for i, h in mono.exponents.counts:
                group.extend([tower[i - 1]] * h)
            term = lambda_scalar(tuple(group)).scale(mono.coefficient)
            total = total + term
    return total


# -- transport couples driven by characteristics ---------------------------------

@dataclass
class TransportCouple:
    """A density pushed forward along the flow of a smooth velocity field, with
    the continuity equation holding by construction.  Characteristics are
    integrated by a high-order adaptive scheme."""

    mu0: object
    velocity: VelocityField
    rtol: float = 1e-12
    atol: float = 1e-13

    def __post_init__(self):
        if self.mu0.dim != 1 or self.velocity.dim != 1:
            raise TransportError("characteristics-driven couples are one-dimensional")

    def flow(self, ts, x0) -> dict:
        """Characteristics and their space-derivative at the requested times:
        maps t -> (X_t, dX_t/dx0), including negative times."""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        vx = self.velocity.comps[0]
        v_fun = _lambdified(sympy.srepr(vx), 1)
        dv_fun = _lambdified(sympy.srepr(sympy.diff(vx, X_SYMS[0])), 1)
        npts = len(x0)

        def rhs(t, state):
            x = state[:npts]
            j = state[npts:]
            vv = np.broadcast_to(np.asarray(v_fun(t, x), dtype=float), x.shape)
            dv = np.broadcast_to(np.asarray(dv_fun(t, x), dtype=float), x.shape)
            return np.concatenate([vv, dv * j])

        out = {}
        state0 = np.concatenate([x0, np.ones(npts)])
        for sign in (1, -1):
            sel = sorted(t for t in ts if (t > 0 if sign == 1 else t < 0))
            if sign == -1:
                sel = sel[::-1]
            if not sel:
                continue
            sol = solve_ivp(rhs, (0.0, sel[-1]), state0, t_eval=sel, rtol=self.rtol,
                            atol=self.atol, method="DOP853", dense_output=False)
            if not sol.success:
                raise TransportError(f"characteristics integration failed: {sol.message}")
            for i, t in enumerate(sel):
                out[t] = (sol.y[:npts, i], sol.y[npts:, i])
        if any(t == 0 for t in ts):
            out[0.0] = (x0.copy(), np.ones(npts))
        return out

    def pushforward_integral(self, g_vals_at, ts, grid) -> dict:
        """Integrals of a function against the evolved density at several
        times, via pullback to the initial grid."""
        mu0 = mu_derivatives(self.mu0, grid.points, 0).tensors[0]
        flows = self.flow(ts, grid.points[:, 0])
        return {
            t: fsum((grid.weights * mu0 * g_vals_at(t, xs)).tolist())
            for t, (xs, _) in flows.items()
        }


@dataclass(frozen=True)
class LinearFunctional:
    """F(mu) = integral of f; its differentials pair derivative tensors of f
    with tensor products of the arguments."""

    f: sympy.Expr


@dataclass(frozen=True)
class EntropyFunctional:
    """The entropy integral; its differentials are the integrated trace-chain
    operators (one-dimensional verification route)."""


def wasserstein_fdb(couple, functional, n: int, t: float,
                    steps=(0.02, 0.01, 0.005), grid_tol=1e-9) -> tuple[float, float]:
    """Both sides of the chain rule for d^n/dt^n F(mu_t) along a transport
    couple: the left side by high-order finite differences of the pulled-back
    integral, the right side assembled from the differentials of F paired with
    Bell polynomials of the convective tower."""
    if n < 1 or n > 4:
        raise TransportError("chain-rule verification supports orders 1..4")
    if isinstance(couple, ConvectiveGeodesic):
        return _fdb_geodesic(couple, functional, n, t, steps, grid_tol)
    grid = build_grid(couple.mu0, grid_tol)
    mu0 = mu_derivatives(couple.mu0, grid.points, 0).tensors[0]
    offs, base_h = lattice_offsets(n, steps)
    ts = sorted({t + j * base_h for j in offs} | {t})
    flows = couple.flow(ts, grid.points[:, 0])

    phi = couple.velocity
    tower = cD_tower(phi, max(0, n - 1))
    xs_t, jac_t = flows[t]
    pts_t = xs_t.reshape(-1, 1)

    if isinstance(functional, LinearFunctional):
        f = sympy.sympify(functional.f)
        f_derivs = [f]
        for _ in range(n):
            f_derivs.append(sympy.diff(f_derivs[-1], X_SYMS[0]))

        def lhs_at(tt):
            xs, _ = flows[tt]
            vals = _eval_expr(f, 0.0, xs.reshape(-1, 1))
            return fsum((grid.weights * mu0 * vals).tolist())

        samples = {j: lhs_at(t + j * base_h) for j in offs}
        lhs = fd_derivative_from_samples(samples, t, base_h, n, steps=steps).value

        rhs_terms = []
        for k in range(1, n + 1):
            fk = _eval_expr(f_derivs[k], 0.0, pts_t)
            for mono in bell_polynomial(n, k):
                prod = np.ones(len(pts_t))
                for i, h in mono.exponents.counts:
                    vals = tower[i - 1].value(t, pts_t)[:, 0]
                    prod = prod * vals**h
                rhs_terms.append(
                    mono.coefficient * fsum((grid.weights * mu0 * fk * prod).tolist())
                )
        return lhs, fsum(rhs_terms)

    if isinstance(functional, EntropyFunctional):
        logmu0 = np.log(np.maximum(mu0, 1e-300))

        def lhs_at(tt):
            _, jac = flows[tt]
            return fsum((grid.weights * mu0 * (logmu0 - np.log(jac))).tolist())

        samples = {j: lhs_at(t + j * base_h) for j in offs}
        lhs = fd_derivative_from_samples(samples, t, base_h, n, steps=steps).value

        rhs_terms = []
        for k in range(1, n + 1):
            for mono in bell_polynomial(n, k):
                group = []
                for i, h in mono.exponents.counts:
                    group.extend([tower[i - 1]] * h)
                vals = lambda_n(group, None, t, pts_t)
                rhs_terms.append(
                    mono.coefficient * fsum((grid.weights * mu0 * vals).tolist())
                )
        return lhs, fsum(rhs_terms)
    raise TransportError(f"unsupported functional {type(functional).__name__}")


def _fdb_geodesic(geo: ConvectiveGeodesic, functional, n, t, steps, grid_tol):
    grid = build_grid(geo.mu0, grid_tol)
    mu0 = mu_derivatives(geo.mu0, grid.points, 0).tensors[0]
    if not isinstance(functional, LinearFunctional):
        raise TransportError("geodesic verification uses linear functionals")
    f = sympy.sympify(functional.f)

    def F(tt):
        ys = geo.transport_map(tt, grid.points)
        vals = _eval_expr(f, 0.0, ys)
        return fsum((grid.weights * mu0 * vals).tolist())

    lhs = fd_derivative(F, t, n, steps=steps).value
    # the tower collapses: only the k = n term with the field to the n-th
    # tensor power survives
    fn = f
    for _ in range(n):
        fn = sympy.diff(fn, X_SYMS[0])
    ys = geo.transport_map(t, grid.points)
    phi_vals = geo.velocity_at(t, ys)[:, 0]
    fk = _eval_expr(fn, 0.0, ys)
    rhs_direct = fsum((grid.weights * mu0 * fk * phi_vals**n).tolist())
    # assembled route with the exactly-zero tower entries, for the collapse check
    gf = geo.field()
    tower = cD_tower(gf, max(0, n - 1))
    rhs_terms = []
    for k in range(1, n + 1):
        fkv = _eval_expr(sympy.diff(f, X_SYMS[0], k), 0.0, ys)
        for mono in bell_polynomial(n, k):
            prod = np.ones(len(ys))
            for i, h in mono.exponents.counts:
                vals = tower[i - 1].value(t, ys)[:, 0] if hasattr(tower[i - 1], "value") else 0.0
                prod = prod * np.asarray(vals) ** h
            rhs_terms.append(mono.coefficient * fsum((grid.weights * mu0 * fkv * prod).tolist()))
    rhs = fsum(rhs_terms)
    assert abs(rhs - rhs_direct) <= 1e-12 * max(1.0, abs(rhs_direct))
    return lhs, rhs


# -- internal-energy differentials along geodesics --------------------------------

def energy_derivative_formula(geo: ConvectiveGeodesic, V: Potential | None,
                              fam: PressureFamily, n: int, grid=None) -> float:
    """Order-n differential of the internal energy at the initial density of a
    geodesic: Bell polynomials of the trace-chain operators of the field,
    weighted by the iterated pressures of the relative density, integrated
    against the reference measure."""
    if n < 1 or n > 4:
        raise TransportError("energy differentials supported up to order 4")
    if grid is None:
        grid = build_grid(geo.mu0, 1e-9)
    check_grid(geo.mu0, grid)
    pts = grid.points
    mu0 = mu_derivatives(geo.mu0, pts, 0).tensors[0]
    v_vals = V.value(pts) if V is not None else np.zeros(len(pts))
    rho = mu0 * np.exp(v_vals)
    vf = geo.v.as_field()
    lam = [None]
    for j in range(1, n + 1):
        lam.append(lambda_n([vf] * j, V, 0.0, pts))
    total = []
    for k in range(1, n + 1):
        pk = fam.p(k)(rho)
        bell_vals = _bell_value_seq(lam, n, k)
        total.append(fsum((grid.weights * np.exp(-v_vals) * bell_vals * pk).tolist()))
    return fsum(total)


def _bell_value_seq(lam, n, k):
    npts = len(lam[1])
    acc = np.zeros(npts)
    for mono in bell_polynomial(n, k):
        prod = np.full(npts, float(mono.coefficient))
        for i, h in mono.exponents.counts:
            prod = prod * lam[i] ** h
        acc = acc + prod
    return acc


def energy_derivative_fd(geo: ConvectiveGeodesic, V: Potential | None,
                         fam: PressureFamily, n: int, grid=None,
                         steps=(0.02, 0.01, 0.005)):
    """Finite-difference oracle for the same quantity: the energy along the
    geodesic is pulled back to the initial grid in closed form (no re-gridding)
    and differentiated in time at zero."""
    if grid is None:
        grid = build_grid(geo.mu0, 1e-9)
    check_grid(geo.mu0, grid)
    pts = grid.points
    mu0 = mu_derivatives(geo.mu0, pts, 0).tensors[0]
    logmu0 = np.log(np.maximum(mu0, 1e-300))

    if fam.kind == "entropy":
        def g_of(s):
            return s
    else:
        m = fam.m

        def g_of(s):
            return (np.exp((m - 1) * s) - 1.0) / (m - 1)

    def E(tt):
        ys = geo.transport_map(tt, pts)
        v_at = V.value(ys) if V is not None else np.zeros(len(pts))
        jac = geo.map_jacobian_diag(tt, pts)
        log_rho = logmu0 - np.sum(np.log(jac), axis=1) + v_at
        return fsum((grid.weights * mu0 * g_of(log_rho)).tolist())

    return fd_derivative(E, 0.0, n, steps=steps)


def second_variation_hessian_route(model, V: Potential, phi: VelocityField, grid) -> float:
    """Order-two differential of the relative entropy computed from the first
    and second variations directly (log-density Hessian term plus the squared
    weighted divergence), the route that cancels against the trace-chain form."""
    check_grid(model, grid)
    pts = grid.points
    mu = mu_derivatives(model, pts, 0).tensors[0]
    u = logU_derivatives(model, pts, 2)
    phi_v = phi.value(0.0, pts)
    phi_j = phi.jacobian(0.0, pts)
    hess_logmu = u.tensors[2]
    hess_v = V.tensor(2, pts)
    term1 = np.einsum("qa,qab,qb->q", phi_v, hess_logmu + hess_v, phi_v)
    div_weighted = np.einsum("qaa->q", phi_j) + np.einsum("qa,qa->q", phi_v, u.tensors[1])
    term2 = div_weighted**2
    return fsum((grid.weights * mu * (term1 + term2)).tolist())


def gamma2_route(model, V: Potential, phi: VelocityField, grid) -> float:
    """The trace-chain route to the same Hessian: trace of the squared Jacobian
    plus the potential curvature pairing, integrated against the density."""
    check_grid(model, grid)
    pts = grid.points
    mu = mu_derivatives(model, pts, 0).tensors[0]
    vals = lambda_n([phi.as_field()] * 2, V, 0.0, pts)
    return fsum((grid.weights * mu * vals).tolist())


def lambda_recursion_check(geo: ConvectiveGeodesic, V: Potential | None, n: int,
                           t: float, y) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the recursion carrying the trace-chain operator of order n
    to order n+1 along a geodesic (all convective derivatives of the arguments
    vanish): d = 1, exact implicit derivatives of the inverse map."""
    if geo.v.dim != 1:
        raise TransportError("recursion check is one-dimensional")
    pts = _pts(y, 1)
    x = geo.invert_map(t, pts)
    vx = geo.v.comps[0]
    v = _eval_expr(vx, 0.0, x)
    v1 = _eval_expr(sympy.diff(vx, X_SYMS[0]), 0.0, x)
    v2 = _eval_expr(sympy.diff(vx, X_SYMS[0], 2), 0.0, x)
    J = 1.0 + t * v1
    x_y = 1.0 / J
    x_t = -v / J
    phi = v
    phi_y = v1 * x_y
    phi_t = v1 * x_t
    phi_yy = v2 * x_y**2 + v1 * (-t * v2 * x_y**2 / J)
    phi_ty = v2 * x_t * x_y + v1 * (-(v1 + t * v2 * x_t) / J**2)
    c_n = (-1) ** n * math.factorial(n - 1)
    c_n1 = (-1) ** (n + 1) * math.factorial(n)
    if V is None:
        V = Potential.zero(1)
    vn = V.tensor(n, pts)[(slice(None),) + (0,) * n]
    vn1 = V.tensor(n + 1, pts)[(slice(None),) + (0,) * (n + 1)]
    lam_t = c_n * n * phi_y ** (n - 1) * phi_ty + n * phi ** (n - 1) * phi_t * vn
    lam_y = c_n * n * phi_y ** (n - 1) * phi_yy + n * phi ** (n - 1) * phi_y * vn + phi**n * vn1
    lhs = lam_t + phi * lam_y
    rhs = c_n1 * phi_y ** (n + 1) + phi ** (n + 1) * vn1
    return lhs, rhs
