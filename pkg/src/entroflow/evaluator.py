"""Numeric evaluation of diagram expressions against densities.

Each diagram term evaluates by an einsum contraction of log-density derivative
tensors over its edges (loops trace a single tensor), integrated against the
density by the grid rule.  Forest values, iterated pressures, internal-energy
functionals and the finite-difference entropy oracle live here too.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from functools import lru_cache
from math import fsum

import numpy as np

from entroflow.density import (
    DensityError,
    check_grid,
    build_grid,
    entropy_at,
    heat_evolve,
    logU_derivatives,
    max_order,
    model_key,
)
from entroflow.diagram import DiagramExpr, Multigraph, compile_tree
from entroflow.fd import FdEstimate, fd_derivative
from entroflow.forest import WeightedForest

_LETTER_POOL = (string.ascii_lowercase.replace("q", "") + string.ascii_uppercase)


@lru_cache(maxsize=None)
def _term_plan(mg: Multigraph):
    """einsum subscripts for one multigraph: one letter per edge (twice on the
    same operand for a loop), free letters for dangling indices in label
    order, and 'q' for the point axis."""
    pool = iter(_LETTER_POOL)
    slots = [[] for _ in range(mg.node_count)]
    for u, v in mg.edges:
        letter = next(pool)
        slots[u].append(letter)
        slots[v].append(letter)
    out_letters = []
    for node, _label in sorted(mg.dangling, key=lambda t: t[1]):
        letter = next(pool)
        slots[node].append(letter)
        out_letters.append(letter)
    ins = ",".join("q" + "".join(s) for s in slots)
    spec = ins + "->q" + "".join(out_letters)
    return spec, mg.degrees


def eval_expr_at(expr: DiagramExpr, u_stack) -> np.ndarray:
    """Pointwise value of a diagram expression given a log-density derivative
    stack: shape (npoints,) plus one density-dimension axis per dangling label
    (axes ordered by label)."""
    npts = u_stack.tensors[0].shape[0]
    d = u_stack.tensors[1].shape[1] if u_stack.order >= 1 else 1
    out_shape = (npts,) + (d,) * len(expr.dangling_labels)
    total = np.zeros(out_shape)
    for mg, coeff in expr.terms:
        spec, degrees = _term_plan(mg)
        if max(degrees) > u_stack.order:
            raise DensityError(
                f"diagram needs derivative order {max(degrees)}, stack has {u_stack.order}"
            )
        operands = [u_stack.tensors[deg] for deg in degrees]
        total += float(coeff) * np.einsum(spec, *operands)
    return total


def _u_stack(model, grid, order):
    cache = grid.__dict__.setdefault("_u_stack_cache", {})
    have = cache.get("stack")
    if have is None or have.order < order:
        cache["stack"] = logU_derivatives(model, grid.points, order)
    return cache["stack"]


def eval_diagram(expr: DiagramExpr, model, grid) -> float:
    """Integral of a scalar diagram expression against the density: the full
    contraction at every grid point, summed with compensated accumulation."""
    if expr.dangling_labels:
        raise DensityError("only scalar (no-dangling) expressions integrate")
    check_grid(model, grid)
    if expr.is_zero:
        return 0.0
    need = expr.max_degree()
    if need > max_order(model):
        raise DensityError(f"diagram degree {need} exceeds model max_order {max_order(model)}")
    stack = _u_stack(model, grid, need)
    integrand = eval_expr_at(expr, stack)
    mu = np.exp(stack.tensors[0])
    return fsum((grid.weights * mu * integrand).tolist())


def eval_forest(forest: WeightedForest, model, grid) -> float:
    """Value of a weighted forest: multiplicity-weighted sum of its trees'
    compiled diagram values.  Equals the |order|-th time-derivative of the
    entropy along the heat flow, up to the alternating sign."""
    total = []
    for tree, mult in forest.entries:
        total.append(mult * eval_diagram(compile_tree(tree), model, grid))
    return fsum(total)


def eval_tree(tree, model, grid) -> float:
    return eval_diagram(compile_tree(tree), model, grid)


# -- iterated pressures and internal energies ---------------------------------

@dataclass(frozen=True)
class PressureFamily:
    """Energy density h with its ladder p_0 = h, p_{k+1} = rho*p_k' - p_k.

    Two families are stored: 'entropy' (h = rho log rho) and 'power' with
    exponent m != 1 (h = (rho^m - rho)/(m - 1)).
    """

    kind: str
    m: float | None = None

    @staticmethod
    def entropy() -> "PressureFamily":
        return PressureFamily("entropy")

    @staticmethod
    def power(m: float) -> "PressureFamily":
        if m == 1:
            raise ValueError("power family needs m != 1; m = 1 is the entropy family")
        return PressureFamily("power", float(m))

    def p(self, k: int):
        if k < 0 or k > 6:
            raise ValueError("pressure order must lie in [0, 6]")
        if self.kind == "entropy":
            if k == 0:
                return lambda rho: rho * np.log(rho)
            if k == 1:
                return lambda rho: np.asarray(rho, dtype=float)
            return lambda rho: np.zeros_like(np.asarray(rho, dtype=float))
        m = self.m
        if k == 0:
            return lambda rho: (rho**m - rho) / (m - 1)
        coeff = (m - 1) ** (k - 1)
        return lambda rho: coeff * rho**m


def pressures(fam: PressureFamily, k: int):
    return fam.p(k)


def internal_energy(model, V, fam: PressureFamily, grid) -> float:
    """E(mu) = integral of h(d mu/d nu) d nu for the reference nu = e^{-V} dx;
    V is a callable on point arrays (None meaning V = 0).  With the entropy
    family and V = 0 this is the entropy integral itself."""
    check_grid(model, grid)
    stack = _u_stack(model, grid, 0)
    mu = np.exp(stack.tensors[0])
    if V is None:
        v_vals = np.zeros(len(mu))
    else:
        v_vals = np.asarray(V(grid.points), dtype=float)
    rho = mu * np.exp(v_vals)
    if not np.all(np.isfinite(rho)):
        raise DensityError("relative density overflowed: V too steep for this grid")
    h = fam.p(0)
    vals = np.where(rho > 0, h(np.maximum(rho, 1e-300)), 0.0)
    return fsum((grid.weights * np.exp(-v_vals) * vals).tolist())


# -- finite-difference oracle for entropy time-derivatives --------------------

def entropy_time_derivative_fd(base_model, t: float, order: int,
                               steps=(0.02, 0.01, 0.005), tol: float = 1e-8) -> FdEstimate:
    """order-th time-derivative of the entropy along the heat flow started at
    base_model, by central differences on one fixed grid (built for the widest
    density in the stencil, so quadrature error varies smoothly in t)."""
    span = max(steps) * (order + 5)
    if t - span <= 0:
        raise ValueError("stencil would cross t = 0; increase t or shrink steps")
    grid = build_grid(heat_evolve(base_model, t + span), tol)
    cache: dict[float, float] = {}

    def H(tt: float) -> float:
        if tt not in cache:
            cache[tt] = entropy_at(heat_evolve(base_model, tt), grid.points, grid.weights)
        return cache[tt]

    return fd_derivative(H, t, order, steps=steps)


def gaussian_forest_value(dim: int, s: float, m: int) -> float:
    """Closed-form forest value for the isotropic Gaussian with variance s per
    axis: dim * (m-1)! * 2^{m-1} / s^m, from differentiating the Gaussian
    entropy along the heat flow."""
    from math import factorial

    if m == 0:
        # entropy itself
        import math

        return -0.5 * dim * math.log(2 * math.pi * math.e * s)
    return dim * factorial(m - 1) * 2 ** (m - 1) / s**m


def ledoux_gamma_integrand(n: int, u_stack) -> np.ndarray:
    """Ledoux's iterated-gradient integrands for the one-dimensional heat
    flow, orders 3 and 4 (the only closed forms used as cross-check
    constants)."""
    if u_stack.tensors[1].shape[1] != 1:
        raise DensityError("iterated-gradient cross-check is one-dimensional")
    u2 = u_stack.tensors[2][:, 0, 0]
    u3 = u_stack.tensors[3][:, 0, 0, 0]
    if n == 3:
        return u3**2 - 2 * u2**3
    if n == 4:
        u4 = u_stack.tensors[4][:, 0, 0, 0, 0]
        return u4**2 - 12 * u2 * u3**2 + 6 * u2**4
    raise ValueError("only orders 3 and 4 have stored closed forms")


def ledoux_forest_value(model, grid, n: int) -> float:
    """2^{n-1} times the integral of the order-n iterated-gradient integrand:
    an independent route to the order-n forest value in one dimension."""
    check_grid(model, grid)
    stack = _u_stack(model, grid, max(4, n))
    mu = np.exp(stack.tensors[0])
    vals = ledoux_gamma_integrand(n, stack)
    return 2 ** (n - 1) * fsum((grid.weights * mu * vals).tolist())


@dataclass
class ResultRecord:
    """Machine-readable verification record."""

    density: str
    t: float
    order: int
    value: float
    method: str  # "diagram" | "fd" | "closed_form"
    error_estimate: float

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "density": self.density,
            "t": self.t,
            "order": self.order,
            "value": self.value,
            "method": self.method,
            "error_estimate": self.error_estimate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
