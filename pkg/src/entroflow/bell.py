"""Partial exponential Bell polynomials over exact integers.

B_{n,k}(X_1, ..., X_{n-k+1}) enumerates the ways of partitioning n items into k
blocks, each monomial X_1^{h_1} X_2^{h_2} ... recording the block-size profile.
All coefficients are arbitrary-precision integers; nothing in this module touches
floating point.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass
from math import comb, factorial
from typing import Callable, Iterable, Iterator, Mapping, Sequence


@dataclass(frozen=True)
class PartitionVector:
    """Finitely supported map i -> h_i with i >= 1, h_i >= 0.

    For membership in B_{n,k} a vector must satisfy sum(h_i) == k and
    sum(i*h_i) == n.  Stored as a sorted tuple of (index, count) pairs with all
    counts positive, so instances are hashable and canonical.
    """

    counts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for i, h in self.counts:
            if i < 1 or h < 1:
                raise ValueError(f"invalid partition entry ({i}, {h})")
        if list(self.counts) != sorted(self.counts):
            raise ValueError("counts must be sorted by index")

    @staticmethod
    def from_mapping(m: Mapping[int, int]) -> "PartitionVector":
        return PartitionVector(tuple(sorted((i, h) for i, h in m.items() if h > 0)))

    def get(self, i: int) -> int:
        for j, h in self.counts:
            if j == i:
                return h
        return 0

    @property
    def block_count(self) -> int:
        """k = total number of parts."""
        return sum(h for _, h in self.counts)

    @property
    def weight(self) -> int:
        """n = sum of parts with multiplicity."""
        return sum(i * h for i, h in self.counts)

    @property
    def max_index(self) -> int:
        return self.counts[-1][0] if self.counts else 0

    def is_valid_for(self, n: int, k: int) -> bool:
        return self.block_count == k and self.weight == n

    def as_dict(self) -> dict[int, int]:
        return dict(self.counts)


@dataclass(frozen=True)
class BellMonomial:
    """One term coeff * X_1^{h_1} X_2^{h_2} ... of a Bell polynomial."""

    coefficient: int
    exponents: PartitionVector


@dataclass(frozen=True)
class BellPolynomial:
    n: int
    k: int
    monomials: tuple[BellMonomial, ...]

    def __iter__(self) -> Iterator[BellMonomial]:
        return iter(self.monomials)

    @property
    def is_zero(self) -> bool:
        return not self.monomials


def bell_coefficient(n: int, k: int, h: PartitionVector) -> int:
    """Exact coefficient of X_1^{h_1} X_2^{h_2}... in B_{n,k}; 0 if h is not a
    valid block-size profile for (n, k)."""
    if not h.is_valid_for(n, k):
        return 0
    denom = 1
    for i, hi in h.counts:
        denom *= factorial(hi) * factorial(i) ** hi
    num = factorial(n)
    assert num % denom == 0
    return num // denom


def _profiles(n: int, k: int, max_part: int) -> Iterator[dict[int, int]]:
    # Recursive descent on the largest part; deterministic order.
    if k == 0:
        if n == 0:
            yield {}
        return
    if n < k or max_part < 1:
        return
    for m in range(min(k, n // max_part), -1, -1):
        for rest in _profiles(n - m * max_part, k - m, max_part - 1):
            if m > 0:
                out = dict(rest)
                out[max_part] = m
                yield out
            else:
                yield rest


def bell_polynomial(n: int, k: int) -> BellPolynomial:
    """All monomials of B_{n,k}, built by bounded search over block-size
    profiles.  Conventions: B_{0,0} = 1; zero polynomial when k > n, when
    exactly one of n, k is zero, or when an argument is negative."""
    if n == 0 and k == 0:
        one = BellMonomial(1, PartitionVector(()))
        return BellPolynomial(0, 0, (one,))
    if n < 0 or k < 0 or k > n or k == 0 or n == 0:
        return BellPolynomial(n, k, ())
    monos = []
    for prof in _profiles(n, k, n - k + 1):
        pv = PartitionVector.from_mapping(prof)
        monos.append(BellMonomial(bell_coefficient(n, k, pv), pv))
    monos.sort(key=lambda m: m.exponents.counts)
    return BellPolynomial(n, k, tuple(monos))


def bell_apply(
    poly: BellPolynomial,
    args: Sequence,
    *,
    product: Callable = operator.mul,
    scale: Callable = lambda c, x: c * x,
    add: Callable = operator.add,
    zero=0,
):
    """Evaluate a Bell polynomial over any commutative-product structure.

    ``args`` supplies X_1, X_2, ... in order.  Each monomial becomes
    scale(coeff, product-chain of its arguments), the chain ordered by
    ascending index, each index repeated by its exponent; monomials are
    combined with ``add``.  The structure only needs an associative product,
    integer scaling and addition, so scalars, polynomials, tensors and
    diagram expressions all work with the right callbacks.
    """
    needed = max((m.exponents.max_index for m in poly.monomials), default=0)
    if len(args) < needed:
        raise ValueError(f"B_{{{poly.n},{poly.k}}} needs {needed} arguments, got {len(args)}")
    total = zero
    first = True
    for mono in poly.monomials:
        factors = []
        for i, h in mono.exponents.counts:
            factors.extend([args[i - 1]] * h)
        if not factors:
            term = scale(mono.coefficient, _structure_one(args, zero))
        else:
            acc = factors[0]
            for f in factors[1:]:
                acc = product(acc, f)
            term = scale(mono.coefficient, acc)
        total = term if first else add(total, term)
        first = False
    return total


def _structure_one(args: Sequence, zero):
    # Only reachable for B_{0,0}; scalars are the sole supported case there.
    if args and not isinstance(args[0], (int, float, complex)):
        raise ValueError("B_{0,0} over non-scalar structures is not supported")
    return 1


def bell_number(n: int) -> int:
    """Row sum sum_k B_{n,k}(1,1,...), via the Bell triangle."""
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]
