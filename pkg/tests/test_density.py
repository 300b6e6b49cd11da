"""Density oracle tests: hand-differentiated values, convolution identities,
round trips, and quadrature-grid contracts."""

import math

import numpy as np
import pytest

from entroflow.density import (
    DensityError,
    FloorError,
    Gaussian,
    GridError,
    HeatEvolved,
    Quartic1D,
    build_grid,
    density_from_config,
    entropy,
    entropy_at,
    heat_evolve,
    isotropic_gaussian,
    logU_derivatives,
    logconcavity_margin,
    mu_derivatives,
)
from entroflow.fd import fd_derivative

QUARTIC = Quartic1D(a=0.25, b=0.5, c=0.0)


class TestMuDerivatives:
    def test_standard_gaussian_at_origin(self):
        st = mu_derivatives(isotropic_gaussian(1.0), 0.0, 2)
        assert st.tensors[0][0] == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)
        assert st.tensors[1][0, 0] == pytest.approx(0.0, abs=1e-16)
        assert st.tensors[2][0, 0, 0] == pytest.approx(-1 / math.sqrt(2 * math.pi), rel=1e-14)

    def test_heat_evolved_gaussian_is_gaussian(self):
        lhs = HeatEvolved(isotropic_gaussian(1.0), 0.5)
        rhs = isotropic_gaussian(2.0)
        xs = np.array([-1.7, -0.3, 0.0, 0.8, 2.1])
        a = mu_derivatives(lhs, xs, 2)
        b = mu_derivatives(rhs, xs, 2)
        for k in range(3):
            assert np.allclose(a.tensors[k], b.tensors[k], rtol=1e-9, atol=1e-12)

    def test_quartic_score(self):
        st = mu_derivatives(QUARTIC, 1.0, 1)
        score = st.tensors[1][0, 0] / st.tensors[0][0]
        assert score == pytest.approx(-2.0, rel=1e-13)

    def test_order_cap(self):
        with pytest.raises(DensityError):
            mu_derivatives(isotropic_gaussian(1.0, dim=2), [0.0, 0.0], 8)


class TestLogDerivatives:
    def test_gaussian_quadratic_log_density(self):
        st = logU_derivatives(isotropic_gaussian(2.0), [0.3], 4)
        assert st.tensors[2][0, 0, 0] == pytest.approx(-0.5, rel=1e-14)
        assert st.tensors[3][0, 0, 0, 0] == 0.0
        assert st.tensors[4][0, 0, 0, 0, 0] == 0.0

    def test_quartic_direct(self):
        st = logU_derivatives(QUARTIC, [1.0], 4)
        assert st.tensors[3][0, 0, 0, 0] == pytest.approx(-6.0, rel=1e-14)
        assert st.tensors[4][0, 0, 0, 0, 0] == pytest.approx(-6.0, rel=1e-14)

    def test_heat_evolved_round_trip(self):
        # rebuild (d^k mu)/mu from the recovered log-derivatives through the
        # forward set-partition expansion
        from entroflow.density import _mu_over_mu_from_u

        model = HeatEvolved(QUARTIC, 0.25)
        xs = np.array([-1.2, 0.0, 0.4, 1.5])
        K = 5
        mu = mu_derivatives(model, xs, K)
        u = logU_derivatives(model, xs, K)
        rebuilt = _mu_over_mu_from_u(list(u.tensors), K)
        for k in range(1, K + 1):
            direct = mu.tensors[k] / mu.tensors[0].reshape((-1,) + (1,) * k)
            denom = np.maximum(np.abs(direct), 1e-8)
            assert np.max(np.abs(rebuilt[k] - direct) / denom) < 1e-10

    def test_positivity_floor(self):
        model = HeatEvolved(QUARTIC, 0.1)
        with pytest.raises(FloorError):
            logU_derivatives(model, [80.0], 1)

    def test_symmetry_2d(self):
        g = Gaussian(mean=(0.1, -0.2), cov=(1.0, 0.5))
        st = logU_derivatives(g, [0.4, 0.7], 4)
        for k in range(2, 5):
            t = st.tensors[k][0]
            perm = np.transpose(t, axes=list(range(k))[::-1])
            assert np.array_equal(t, perm)


class TestHeatEvolve:
    def test_gaussian_closed_form(self):
        assert heat_evolve(isotropic_gaussian(1.0), 0.5) == isotropic_gaussian(2.0)

    def test_rejects_nonpositive_time(self):
        with pytest.raises(DensityError):
            heat_evolve(QUARTIC, 0.0)

    def test_quartic_stays_log_concave(self):
        model = heat_evolve(QUARTIC, 0.25)
        grid = build_grid(model, 1e-8)
        assert logconcavity_margin(model, grid) <= 1e-8

    def test_semigroup_composition(self):
        nested = HeatEvolved(HeatEvolved(QUARTIC, 0.2), 0.3)
        flat = HeatEvolved(QUARTIC, 0.5)
        xs = np.array([-0.9, 0.2, 1.1])
        a = mu_derivatives(nested, xs, 1)
        b = mu_derivatives(flat, xs, 1)
        assert np.allclose(a.tensors[0], b.tensors[0], rtol=1e-8)
        assert np.allclose(a.tensors[1], b.tensors[1], rtol=1e-7, atol=1e-12)
        assert heat_evolve(HeatEvolved(QUARTIC, 0.2), 0.3) == flat


class TestEntropyAndGrid:
    def test_gaussian_entropy_1d(self):
        m = isotropic_gaussian(1.0)
        val, err = entropy(m, build_grid(m, 1e-8))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi * math.e), abs=1e-9)

    def test_gaussian_entropy_2d(self):
        m = isotropic_gaussian(1.0, dim=2)
        val, _ = entropy(m, build_grid(m, 1e-8))
        assert val == pytest.approx(-math.log(2 * math.pi * math.e), abs=1e-8)

    def test_heat_evolved_gaussian_entropy(self):
        m = HeatEvolved(isotropic_gaussian(1.0), 0.5)
        val, _ = entropy(m, build_grid(m, 1e-8))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi * math.e * 2.0), abs=1e-8)

    def test_grid_normalization_and_moment(self):
        for s in (1.0, 2.0, 4.0):
            m = isotropic_gaussian(s)
            grid = build_grid(m, 1e-8)
            mu = mu_derivatives(m, grid.points, 0).tensors[0]
            mass = float(np.sum(grid.weights * mu))
            assert abs(mass - 1.0) <= 1e-8
            second = float(np.sum(grid.weights * grid.points[:, 0] ** 2 * mu))
            assert abs(second - s) <= 10 * 1e-8

    def test_quartic_grid(self):
        grid = build_grid(QUARTIC, 1e-8)
        mu = mu_derivatives(QUARTIC, grid.points, 0).tensors[0]
        assert abs(float(np.sum(grid.weights * mu)) - 1.0) <= 1e-8

    def test_stale_grid_rejected(self):
        grid = build_grid(isotropic_gaussian(1.0), 1e-6)
        with pytest.raises(GridError):
            entropy(isotropic_gaussian(2.0), grid)

    def test_tolerance_domain(self):
        with pytest.raises(GridError):
            build_grid(QUARTIC, 1e-2)

    def test_log_concavity_certificates(self):
        for m in (isotropic_gaussian(1.0), Gaussian((0.0, 0.0), (1.0, 0.25)), QUARTIC,
                  heat_evolve(QUARTIC, 0.5)):
            grid = build_grid(m, 1e-8)
            assert logconcavity_margin(m, grid) <= 1e-8


class TestDeBruijn:
    @pytest.mark.parametrize("model,t0", [(isotropic_gaussian(1.0), 0.5), (QUARTIC, 0.3)])
    def test_entropy_decay_equals_fisher_information(self, model, t0):
        evolved = heat_evolve(model, t0)
        grid = build_grid(heat_evolve(model, t0 + 0.1), 1e-8)

        def H(t):
            return entropy_at(heat_evolve(model, t), grid.points, grid.weights)

        dH = fd_derivative(H, t0, order=1, steps=(0.02, 0.01, 0.005))
        stack = logU_derivatives(evolved, grid.points, 1)
        mu = mu_derivatives(evolved, grid.points, 0).tensors[0]
        fisher = float(np.sum(grid.weights * mu * stack.tensors[1][:, 0] ** 2))
        assert abs(-dH.value - fisher) / abs(fisher) < 1e-6


class TestConfig:
    def test_round_trip(self):
        m = density_from_config({"kind": "gaussian", "mean": [0.0], "cov": [1.0], "t": 0.5})
        assert m == isotropic_gaussian(2.0)
        q = density_from_config({"kind": "quartic1d", "a": 0.25, "b": 0.5, "t": 0.25})
        assert q == HeatEvolved(QUARTIC, 0.25)

    def test_unknown_kind(self):
        with pytest.raises(DensityError):
            density_from_config({"kind": "cauchy"})
