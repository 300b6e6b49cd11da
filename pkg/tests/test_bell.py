"""Exact tests for the Bell polynomial engine, against independent combinatorial oracles."""

import itertools
from fractions import Fraction
from math import comb, factorial

import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from entroflow.bell import (
    BellPolynomial,
    PartitionVector,
    bell_apply,
    bell_coefficient,
    bell_number,
    bell_polynomial,
)


def pv(**kw):
    # pv(h1=2, h3=1) -> PartitionVector for X_1^2 X_3
    return PartitionVector.from_mapping({int(k[1:]): v for k, v in kw.items()})


def poly_map(p: BellPolynomial) -> dict:
    return {m.exponents.counts: m.coefficient for m in p.monomials}


def stirling2(n, k):
    # independent oracle: S(n,k) = k S(n-1,k) + S(n-1,k-1)
    if n == 0 and k == 0:
        return 1
    if n == 0 or k == 0:
        return 0
    return k * stirling2(n - 1, k) + stirling2(n - 1, k - 1)


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [part[i] + [first]] + part[i + 1 :]
        yield [[first]] + part


def brute_force_partition_count(n, sizes):
    # number of set partitions of {1..n} whose multiset of block sizes == sizes
    target = sorted(sizes)
    return sum(1 for p in set_partitions(list(range(n))) if sorted(map(len, p)) == target)


class TestCoefficient:
    def test_paper_table_entry(self):
        assert bell_coefficient(4, 2, pv(h2=2)) == 3

    def test_trivial_base(self):
        assert bell_coefficient(1, 1, pv(h1=1)) == 1

    def test_brute_force_set_partitions(self):
        # partitions of {1..6} into blocks of sizes 1, 2, 3
        expected = brute_force_partition_count(6, [1, 2, 3])
        assert expected == 60
        assert bell_coefficient(6, 3, pv(h1=1, h2=1, h3=1)) == expected

    def test_invalid_profile_gives_zero(self):
        assert bell_coefficient(4, 2, pv(h1=2)) == 0
        assert bell_coefficient(4, 2, pv(h1=1, h2=1)) == 0  # weight 3 != 4

    @given(st.integers(1, 8), st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_all_coefficients_positive(self, n, k):
        for mono in bell_polynomial(n, k):
            assert mono.coefficient > 0
            assert mono.exponents.is_valid_for(n, k)


class TestPolynomial:
    def test_low_order_table(self):
        x1, x2, x3, x4 = [pv(**{f"h{i}": 1}).counts for i in (1, 2, 3, 4)]
        assert poly_map(bell_polynomial(1, 1)) == {x1: 1}
        assert poly_map(bell_polynomial(2, 1)) == {x2: 1}
        assert poly_map(bell_polynomial(2, 2)) == {pv(h1=2).counts: 1}
        assert poly_map(bell_polynomial(3, 1)) == {x3: 1}
        assert poly_map(bell_polynomial(3, 2)) == {pv(h1=1, h2=1).counts: 3}
        assert poly_map(bell_polynomial(3, 3)) == {pv(h1=3).counts: 1}
        assert poly_map(bell_polynomial(4, 1)) == {x4: 1}
        assert poly_map(bell_polynomial(4, 2)) == {pv(h2=2).counts: 3, pv(h1=1, h3=1).counts: 4}
        assert poly_map(bell_polynomial(4, 3)) == {pv(h1=2, h2=1).counts: 6}
        assert poly_map(bell_polynomial(4, 4)) == {pv(h1=4).counts: 1}

    def test_conventions(self):
        assert poly_map(bell_polynomial(0, 0)) == {(): 1}
        assert bell_polynomial(3, 0).is_zero
        assert bell_polynomial(0, 2).is_zero
        assert bell_polynomial(2, 5).is_zero
        assert bell_polynomial(-1, 1).is_zero

    def test_stirling_at_ones(self):
        n, k = 7, 3
        val = bell_apply(bell_polynomial(n, k), [1] * (n - k + 1))
        assert val == stirling2(n, k) == 301

    @given(st.integers(0, 8))
    @settings(max_examples=20, deadline=None)
    def test_stirling_all_orders(self, n):
        for k in range(0, n + 1):
            ones = [1] * max(1, n - k + 1)
            assert bell_apply(bell_polynomial(n, k), ones) == stirling2(n, k)

    def test_row_sums_are_bell_numbers(self):
        # independent oracle: B_{n+1} = sum_k C(n,k) B_k
        oracle = [1]
        for n in range(10):
            oracle.append(sum(comb(n, k) * oracle[k] for k in range(n + 1)))
        for n in range(1, 11):
            row = sum(
                bell_apply(bell_polynomial(n, k), [1] * (n - k + 1)) for k in range(1, n + 1)
            )
            assert row == oracle[n] == bell_number(n)

    def test_matches_sympy(self):
        xs = sympy.symbols("x1:9")
        for n in range(1, 7):
            for k in range(1, n + 1):
                ours = bell_apply(
                    bell_polynomial(n, k),
                    xs[: n - k + 1],
                    product=lambda a, b: a * b,
                    scale=lambda c, e: c * e,
                    add=lambda a, b: a + b,
                    zero=sympy.Integer(0),
                )
                theirs = sympy.bell(n, k, xs[: n - k + 1])
                assert sympy.expand(ours - theirs) == 0


class TestApply:
    def test_square_of_scalar(self):
        assert bell_apply(bell_polynomial(2, 2), [5]) == 25

    def test_forced_arithmetic(self):
        # 3*X2^2 + 4*X1*X3 at (1, 2, 3)
        assert bell_apply(bell_polynomial(4, 2), [1, 2, 3]) == 3 * 4 + 4 * 1 * 3 == 24

    def test_arity_error(self):
        with pytest.raises(ValueError):
            bell_apply(bell_polynomial(4, 2), [1, 2])

    def test_chain_rule_against_symbolic_differentiation(self):
        # d^4/dt^4 exp(t^2) at t=0, assembled from Bell polynomials of the
        # derivatives of f(t)=t^2, vs direct symbolic differentiation.
        t = sympy.Symbol("t")
        f = t**2
        fs = [sympy.diff(f, t, i).subs(t, 0) for i in range(1, 5)]
        n = 4
        assembled = sum(
            sympy.exp(0) * bell_apply(bell_polynomial(n, k), fs[: n - k + 1],
                                      product=lambda a, b: a * b,
                                      scale=lambda c, e: c * e,
                                      add=lambda a, b: a + b,
                                      zero=sympy.Integer(0))
            for k in range(1, n + 1)
        )
        direct = sympy.diff(sympy.exp(t**2), t, n).subs(t, 0)
        assert assembled == direct == 12

    def test_polynomial_ring(self):
        # B_{3,2} over the ring of univariate polynomials (coefficient lists)
        def pmul(a, b):
            out = [0] * (len(a) + len(b) - 1)
            for i, ai in enumerate(a):
                for j, bj in enumerate(b):
                    out[i + j] += ai * bj
            return out

        def padd(a, b):
            n = max(len(a), len(b))
            return [(a[i] if i < len(a) else 0) + (b[i] if i < len(b) else 0) for i in range(n)]

        def pscale(c, a):
            return [c * v for v in a]

        res = bell_apply(bell_polynomial(3, 2), [[0, 1], [1]], product=pmul, scale=pscale,
                         add=padd, zero=[0])
        assert res == [0, 3]  # 3*X1*X2 with X1=t, X2=1


# -- formal-polynomial helpers for the identity suite -------------------------

def formal(p: BellPolynomial) -> dict:
    return dict(poly_map(p))


def formal_add(a, b):
    out = dict(a)
    for key, c in b.items():
        out[key] = out.get(key, 0) + c
        if out[key] == 0:
            del out[key]
    return out


def formal_scale(c, a):
    return {k: c * v for k, v in a.items()} if c else {}


def formal_shift(a, index):
    # multiply by X_index
    out = {}
    for key, c in a.items():
        m = dict(key)
        m[index] = m.get(index, 0) + 1
        out[tuple(sorted(m.items()))] = c
    return out


def formal_dXi(a, i):
    out = {}
    for key, c in a.items():
        m = dict(key)
        h = m.get(i, 0)
        if h == 0:
            continue
        if h == 1:
            del m[i]
        else:
            m[i] = h - 1
        out[tuple(sorted(m.items()))] = out.get(tuple(sorted(m.items())), 0) + c * h
    return out


class TestIdentities:
    @pytest.mark.parametrize("n", range(0, 8))
    def test_recurrence(self, n):
        # B_{n+1,k} = sum_i C(n,i) X_{i+1} B_{n-i,k-1}, exact polynomial equality
        for k in range(1, n + 2):
            lhs = formal(bell_polynomial(n + 1, k))
            rhs = {}
            for i in range(0, n + 1):
                rhs = formal_add(
                    rhs, formal_scale(comb(n, i), formal_shift(formal(bell_polynomial(n - i, k - 1)), i + 1))
                )
            assert lhs == rhs

    @pytest.mark.parametrize("n", range(1, 9))
    def test_derivative_identity(self, n):
        # dB_{n,k}/dX_i = C(n,i) B_{n-i,k-1}
        for k in range(1, n + 1):
            b = formal(bell_polynomial(n, k))
            for i in range(1, n - k + 2):
                lhs = formal_dXi(b, i)
                rhs = formal_scale(comb(n, i), formal(bell_polynomial(n - i, k - 1)))
                assert lhs == rhs

    @given(
        st.lists(st.sampled_from([Fraction(v, d) for v in (-2, -1, 1, 2, 3) for d in (1, 2, 3)]),
                 min_size=8, max_size=8),
        st.lists(st.sampled_from([Fraction(v, d) for v in (-2, -1, 1, 2) for d in (1, 2)]),
                 min_size=8, max_size=8),
        st.lists(st.sampled_from([Fraction(v, d) for v in (-1, 1, 2, 3) for d in (1, 3)]),
                 min_size=8, max_size=8),
    )
    @settings(max_examples=30, deadline=None)
    def test_composition(self, xs, fs, gs):
        # z_n built from y (two nested chain rules) equals the composed formula,
        # exactly over rationals, for n <= 7
        def B(n, k, seq):
            if k == 0:
                return Fraction(1) if n == 0 else Fraction(0)
            return bell_apply(bell_polynomial(n, k), seq[: max(1, n - k + 1)],
                              scale=lambda c, e: Fraction(c) * e, zero=Fraction(0))

        ys = [sum((fs[l] * B(k, l, xs) for l in range(0, k + 1)), Fraction(0)) for k in range(8)]
        for n in range(0, 8):
            z_direct = sum((gs[k] * B(n, k, ys[1:]) for k in range(0, n + 1)), Fraction(0))
            z_composed = sum(
                (gs[l] * B(k, l, fs[1:]) * B(n, k, xs) for k in range(0, n + 1) for l in range(0, k + 1)),
                Fraction(0),
            )
            assert z_direct == z_composed
