"""Central finite differences of high order with Richardson extrapolation.

Stencil weights are solved exactly over rationals, so a given (derivative
order, accuracy) pair always produces the identical floating-point weights.
Every estimate returns the extrapolated value together with the disagreement
between successive extrapolations as its error estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial


@lru_cache(maxsize=None)
def central_stencil(order: int, accuracy: int = 6) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Offsets and weights of the central stencil for the given derivative
    order, accurate to at least the given power of the step."""
    if order < 1:
        raise ValueError("derivative order must be >= 1")
    half = (order + accuracy - 1) // 2
    offsets = list(range(-half, half + 1))
    npts = len(offsets)
    # solve sum_j w_j * o_j^i / i! = delta_{i,order} exactly
    mat = [[Fraction(o) ** i / factorial(i) for o in offsets] for i in range(npts)]
    rhs = [Fraction(1) if i == order else Fraction(0) for i in range(npts)]
    weights = _solve_exact(mat, rhs)
    return tuple(offsets), tuple(float(w) for w in weights)


def _solve_exact(mat, rhs):
    n = len(rhs)
    a = [row[:] + [rhs[i]] for i, row in enumerate(mat)]
    for col in range(n):
        piv = next(r for r in range(col, n) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        inv = Fraction(1) / a[col][col]
        a[col] = [v * inv for v in a[col]]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [vr - f * vc for vr, vc in zip(a[r], a[col])]
    return [a[i][n] for i in range(n)]


@dataclass(frozen=True)
class FdEstimate:
    value: float
    error_estimate: float
    raw: tuple[float, ...]  # per-step-size stencil values, largest step first


def fd_derivative(func, t0: float, order: int, steps=(0.02, 0.01, 0.005),
                  accuracy: int = 6) -> FdEstimate:
    """Derivative of a scalar function of one variable by central stencils at a
    ladder of step sizes, combined by Richardson extrapolation.

    ``func`` may be called many times; callers wanting a single batch of
    evaluations should use :func:`fd_derivative_from_samples` on a lattice.
    """
    offsets, weights = central_stencil(order, accuracy)
    vals = []
    for h in steps:
        s = sum(w * func(t0 + o * h) for o, w in zip(offsets, weights))
        vals.append(s / h**order)
    return _extrapolate(vals, steps, order, accuracy)


def fd_derivative_from_samples(samples, t0, lattice_step, order, steps=(0.02, 0.01, 0.005),
                               accuracy: int = 6) -> FdEstimate:
    """Same estimate, but reading function values from a precomputed lattice
    ``samples[j] = f(t0 + j*lattice_step)`` (j may be negative); every step in
    ``steps`` must be an integer multiple of the lattice step."""
    offsets, weights = central_stencil(order, accuracy)
    vals = []
    for h in steps:
        stride = round(h / lattice_step)
        if abs(stride * lattice_step - h) > 1e-12 * h:
            raise ValueError(f"step {h} is not on the sample lattice")
        s = sum(w * samples[o * stride] for o, w in zip(offsets, weights))
        vals.append(s / h**order)
    return _extrapolate(vals, steps, order, accuracy)


def _extrapolate(vals, steps, order, accuracy):
    if len(vals) == 1:
        return FdEstimate(vals[0], float("inf"), tuple(vals))
    extraps = []
    for (h1, v1), (h2, v2) in zip(zip(steps, vals), zip(steps[1:], vals[1:])):
        r = (h1 / h2) ** accuracy
        extraps.append((r * v2 - v1) / (r - 1))
    value = extraps[-1]
    if len(extraps) >= 2:
        err = abs(extraps[-1] - extraps[-2])
    else:
        err = abs(vals[-1] - vals[0])
    return FdEstimate(value, err, tuple(vals))


def lattice_offsets(order: int, steps=(0.02, 0.01, 0.005), accuracy: int = 6):
    """All lattice indices (relative to t0, in units of min(steps) assumed to
    divide every step) needed by :func:`fd_derivative_from_samples`."""
    offsets, _ = central_stencil(order, accuracy)
    base = min(steps)
    need = set()
    for h in steps:
        stride = round(h / base)
        for o in offsets:
            need.add(o * stride)
    return sorted(need), base
