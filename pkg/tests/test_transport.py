"""Transport-module tests: convective calculus rules, geodesic structure,
pointwise expansions, chain-rule and energy-differential verification."""

import math
from fractions import Fraction

import numpy as np
import pytest
import sympy

from entroflow.density import (
    Gaussian,
    Quartic1D,
    build_grid,
    isotropic_gaussian,
    mu_derivatives,
    logU_derivatives,
)
from entroflow.diagram import DiagramExpr, Multigraph
from entroflow.evaluator import PressureFamily
from entroflow.fd import fd_derivative
from entroflow.transport import (
    T_SYM,
    X_SYMS,
    ConvectiveGeodesic,
    EntropyFunctional,
    HeatFlowCouple,
    LinearFunctional,
    Potential,
    SymTensorField,
    TransportCouple,
    TransportError,
    VelocityField,
    ZeroField,
    cD_logrho_pointwise,
    cD_tower,
    convective_derivative,
    energy_derivative_fd,
    energy_derivative_formula,
    gamma2_route,
    iterated_cD,
    lambda_n,
    lambda_recursion_check,
    pushforward_density,
    second_variation_hessian_route,
    wasserstein_fdb,
)

x0, x1 = X_SYMS
QUARTIC = Quartic1D(0.25, 0.5, 0.0)
SINE_FIELD = VelocityField.from_exprs(1, [sympy.Rational(3, 10) * sympy.sin(x0)])
GEO_FIELD = VelocityField.from_exprs(1, [sympy.Rational(1, 5) * x0 + sympy.Rational(1, 10) * sympy.sin(x0)])

SAMPLE_PTS = np.array([-1.3, -0.4, 0.2, 0.9, 1.7])


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


class TestConvectiveDerivative:
    def test_self_advection_of_linear_field(self):
        v = VelocityField.from_exprs(1, [x0])
        cdv = iterated_cD(v, 1)
        assert np.allclose(cdv.value(0.0, SAMPLE_PTS)[:, 0], SAMPLE_PTS)

    def test_product_rule(self):
        phi = VelocityField.from_exprs(1, [x0**2 / 4 + sympy.sin(x0) * (1 + T_SYM)])
        g = SymTensorField.scalar(1, sympy.cos(x0) * (1 + T_SYM**2))
        h = SymTensorField.scalar(1, x0**3 + T_SYM * x0)
        lhs = convective_derivative(g.times(h), phi)
        rhs_a = convective_derivative(g, phi).times(h)
        rhs_b = g.times(convective_derivative(h, phi))
        for t in (0.0, 0.4):
            l = lhs.value(t, SAMPLE_PTS)
            r = rhs_a.value(t, SAMPLE_PTS) + rhs_b.value(t, SAMPLE_PTS)
            assert np.max(np.abs(l - r)) < 1e-10

    def test_gradient_commutation_defect(self):
        phi = VelocityField.from_exprs(1, [x0**2 / 4 + sympy.cos(x0) * T_SYM])
        g = SymTensorField.scalar(1, sympy.sin(2 * x0) + T_SYM * x0**2)
        lhs = convective_derivative(g.grad(), phi)
        rhs_main = convective_derivative(g, phi).grad()
        for t in (0.0, 0.3):
            jac_phi = phi.jacobian(t, SAMPLE_PTS)
            grad_g = g.grad().value(t, SAMPLE_PTS)
            correction = np.einsum("qij,qj->qi", jac_phi, grad_g)
            l = lhs.value(t, SAMPLE_PTS)
            r = rhs_main.value(t, SAMPLE_PTS) - correction
            assert np.max(np.abs(l - r)) < 1e-10

    def test_second_iterate_hand_expansion(self):
        v_expr = sympy.Rational(1, 3) * x0**2 + sympy.sin(x0)
        v = VelocityField.from_exprs(1, [v_expr])
        got = iterated_cD(v, 2).comps[(0,)]
        hand = v_expr * sympy.diff(v_expr * sympy.diff(v_expr, x0), x0)
        assert sympy.simplify(got - hand) == 0

    def test_zero_field_tower(self):
        z = VelocityField.from_exprs(1, [0])
        for n in range(1, 5):
            assert np.all(iterated_cD(z, n).value(0.0, SAMPLE_PTS) == 0.0)

    def test_order_cap(self):
        with pytest.raises(TransportError):
            iterated_cD(SINE_FIELD, 5)


class TestGeodesic:
    def test_velocity_field_is_acceleration_free(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), GEO_FIELD)
        # finite differences of the Newton-inverted oracle, not the tower rule
        for t in (0.2, 0.8):
            for y in (-0.7, 0.5, 1.4):
                phi_t = fd_derivative(lambda tt: geo.velocity_at(tt, [y])[0, 0], t, 1,
                                      steps=(0.004, 0.002, 0.001)).value
                phi_y = fd_derivative(lambda yy: geo.velocity_at(t, [yy])[0, 0], y, 1,
                                      steps=(0.004, 0.002, 0.001)).value
                phi = geo.velocity_at(t, [y])[0, 0]
                assert abs(phi_t + phi * phi_y) < 1e-8

    def test_iterated_tower_vanishes(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), GEO_FIELD)
        f = geo.field()
        for n in (1, 2, 3):
            cdn = iterated_cD(f, n)
            assert isinstance(cdn, ZeroField)
            assert np.all(cdn.value(0.3, SAMPLE_PTS) == 0.0)

    def test_characteristics_are_affine(self):
        from scipy.integrate import solve_ivp

        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), GEO_FIELD)
        x0s = np.array([-1.0, 0.3, 1.2])

        def rhs(t, x):
            return geo.velocity_at(t, x)[:, 0]

        ts = (0.5, 1.0, 1.5)
        sol = solve_ivp(rhs, (0.0, 1.5), x0s, t_eval=ts, rtol=1e-12, atol=1e-13,
                        method="DOP853")
        v0 = geo.v.value(0.0, x0s)[:, 0]
        for i, t in enumerate(ts):
            assert np.max(np.abs(sol.y[:, i] - (x0s + t * v0))) < 1e-8

    def test_gradient_field_closure(self):
        # potential family phi_t = a_t x^2/2 + b_t x with the eikonal decay
        # keeps its gradient field acceleration-free
        a0, b0 = sympy.Rational(1, 2), sympy.Rational(1, 3)
        a_t = a0 / (1 + T_SYM * a0)
        b_t = b0 / (1 + T_SYM * a0)
        phi = VelocityField.from_exprs(1, [a_t * x0 + b_t])
        cd = phi.as_field().cD(phi)
        assert sympy.simplify(cd.comps[(0,)]) == 0

    def test_time_dependent_field_rejected(self):
        with pytest.raises(TransportError):
            ConvectiveGeodesic(isotropic_gaussian(1.0),
                               VelocityField.from_exprs(1, [T_SYM * x0]))

    def test_window_enforced(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0),
                                 VelocityField.from_exprs(1, [-x0]))
        assert geo.t_star < 1.0
        with pytest.raises(TransportError):
            geo.invert_map(geo.t_star + 0.1, [0.0])


class TestLambdaOperators:
    def test_divergence_form_order_one(self):
        # order 1 with a potential: minus divergence plus advected potential
        phi = VelocityField.from_exprs(1, [sympy.sin(x0)])
        V = Potential.from_expr(1, x0**2 / 2)
        got = lambda_n([phi.as_field()], V, 0.0, SAMPLE_PTS)
        want = -np.cos(SAMPLE_PTS) + np.sin(SAMPLE_PTS) * SAMPLE_PTS
        assert np.allclose(got, want, atol=1e-12)

    def test_constant_slope_square(self):
        phi = VelocityField.from_exprs(1, [3 * x0])
        got = lambda_n([phi.as_field()] * 2, None, 0.0, SAMPLE_PTS)
        assert np.allclose(got, 9.0)

    def test_identity_field_cube(self):
        phi = VelocityField.from_exprs(1, [x0])
        got = lambda_n([phi.as_field()] * 3, None, 0.0, SAMPLE_PTS)
        assert np.allclose(got, -2.0)

    def test_recursion_along_geodesic(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), GEO_FIELD)
        V = Potential.from_expr(1, x0**2 / 3 + x0**4 / 20)
        ys = np.array([-0.8, 0.1, 0.9])
        for n in (1, 2, 3):
            lhs, rhs = lambda_recursion_check(geo, V, n, 0.4, ys)
            assert np.max(np.abs(lhs - rhs)) < 1e-8


class TestPointwiseExpansion:
    def test_geodesic_reduces_to_trace_chain(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), GEO_FIELD)
        got = cD_logrho_pointwise(geo, None, 2, 0.3, SAMPLE_PTS)
        want = lambda_n([geo.field()] * 2, None, 0.3, SAMPLE_PTS)
        assert np.allclose(got, want, rtol=1e-12)

    def test_heat_flow_first_order_is_laplacian(self):
        vals, assembled, direct = cD_logrho_pointwise(HeatFlowCouple(QUARTIC), None, 1,
                                                      0.2, SAMPLE_PTS)
        loop = DiagramExpr.from_terms([], {Multigraph.make(1, [(0, 0)]): Fraction(1)})
        assert assembled == direct == loop
        from entroflow.density import heat_evolve

        stack = logU_derivatives(heat_evolve(QUARTIC, 0.2), SAMPLE_PTS, 2)
        assert np.allclose(vals, stack.tensors[2][:, 0, 0], rtol=1e-9)

    def test_heat_flow_second_order_closed_form(self):
        vals, assembled, direct = cD_logrho_pointwise(HeatFlowCouple(QUARTIC), None, 2,
                                                      0.2, SAMPLE_PTS)
        want = DiagramExpr.from_terms([], {
            Multigraph.make(2, [(0, 1), (0, 1)]): Fraction(2),   # squared Hessian trace
            Multigraph.make(1, [(0, 0), (0, 0)]): Fraction(1),   # doubly traced 4th
            Multigraph.make(2, [(0, 0), (0, 1)]): Fraction(1),   # gradient against traced 3rd
        })
        assert assembled == want
        assert direct == want

    @pytest.mark.parametrize("n", [3, 4])
    def test_heat_flow_higher_orders_symbolic(self, n):
        _, assembled, direct = cD_logrho_pointwise(HeatFlowCouple(QUARTIC), None, n,
                                                   0.25, np.array([0.3]))
        assert assembled == direct

    def test_reference_potential_rejected_on_heat_route(self):
        with pytest.raises(TransportError):
            cD_logrho_pointwise(HeatFlowCouple(QUARTIC), Potential.from_expr(1, x0**2), 2,
                                0.2, SAMPLE_PTS)


class TestPushforward:
    def test_zero_field_is_identity(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), VelocityField.from_exprs(1, [0]))
        mu_val, u = pushforward_density(geo, 0.7, SAMPLE_PTS)
        direct = mu_derivatives(isotropic_gaussian(1.0), SAMPLE_PTS, 0).tensors[0]
        assert np.allclose(mu_val, direct, rtol=1e-12)

    def test_linear_field_rescales_gaussian(self):
        geo = ConvectiveGeodesic(isotropic_gaussian(1.0), VelocityField.from_exprs(1, [x0]))
        t = 0.3
        mu_val, u = pushforward_density(geo, t, SAMPLE_PTS, order=4)
        target = isotropic_gaussian((1 + t) ** 2)
        want_mu = mu_derivatives(target, SAMPLE_PTS, 0).tensors[0]
        want_u = logU_derivatives(target, SAMPLE_PTS, 4)
        assert np.allclose(mu_val, want_mu, rtol=1e-10)
        for k in range(5):
            assert np.allclose(u[k], want_u.tensors[k], rtol=1e-9, atol=1e-12)

    def test_nonlinear_field_mass_conservation(self):
        geo = ConvectiveGeodesic(QUARTIC, GEO_FIELD)
        t = min(1.0, geo.t_star / 2)
        span = np.linspace(-8, 8, 4001).reshape(-1, 1)
        mu_val, _ = pushforward_density(geo, t, span, order=0)
        mass = np.trapezoid(mu_val, dx=span[1, 0] - span[0, 0])
        assert abs(mass - 1.0) < 1e-6

    def test_diagonal_2d(self):
        g2 = Gaussian((0.0, 0.0), (1.0, 2.0))
        v = VelocityField.from_exprs(2, [x0, 2 * x1])
        geo = ConvectiveGeodesic(g2, v)
        t = 0.25
        pts = np.array([[0.3, -0.6], [1.0, 0.4]])
        mu_val, u = pushforward_density(geo, t, pts, order=2)
        target = Gaussian((0.0, 0.0), ((1 + t) ** 2, 2.0 * (1 + 2 * t) ** 2))
        want_mu = mu_derivatives(target, pts, 0).tensors[0]
        want_u = logU_derivatives(target, pts, 2)
        assert np.allclose(mu_val, want_mu, rtol=1e-10)
        for k in range(3):
            assert np.allclose(u[k], want_u.tensors[k], rtol=1e-9, atol=1e-12)


class TestContinuity:
    def test_transport_couple_satisfies_continuity(self):
        couple = TransportCouple(QUARTIC, SINE_FIELD)
        grid = build_grid(QUARTIC, 1e-9)
        f = x0**2 + sympy.sin(x0)
        lhs, rhs = wasserstein_fdb(couple, LinearFunctional(f), 1, 0.15)
        assert rel(lhs, rhs) < 1e-8


class TestWassersteinChainRule:
    @pytest.mark.parametrize("n,tol", [(1, 1e-8), (2, 1e-7), (3, 1e-5), (4, 1e-4)])
    def test_linear_functional_non_geodesic(self, n, tol):
        couple = TransportCouple(QUARTIC, SINE_FIELD)
        lhs, rhs = wasserstein_fdb(couple, LinearFunctional(x0**4), n, 0.0)
        assert rel(lhs, rhs) < tol

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_entropy_functional_non_geodesic(self, n):
        couple = TransportCouple(QUARTIC, SINE_FIELD)
        lhs, rhs = wasserstein_fdb(couple, EntropyFunctional(), n, 0.0)
        assert rel(lhs, rhs) < 1e-4

    def test_geodesic_collapse(self):
        geo = ConvectiveGeodesic(QUARTIC, SINE_FIELD)
        lhs, rhs = wasserstein_fdb(geo, LinearFunctional(x0**4), 3, 0.1)
        assert rel(lhs, rhs) < 1e-5


@pytest.fixture(scope="module")
def setup():
    geo = ConvectiveGeodesic(QUARTIC, SINE_FIELD)
    grid = build_grid(QUARTIC, 1e-9)
    return geo, grid


class TestEnergyDifferentials:

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_entropy_family_fd(self, setup, n):
        geo, grid = setup
        got = energy_derivative_formula(geo, None, PressureFamily.entropy(), n, grid=grid)
        fd = energy_derivative_fd(geo, None, PressureFamily.entropy(), n, grid=grid)
        assert rel(got, fd.value) < 1e-4

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_power_family_fd(self, setup, n):
        geo, grid = setup
        fam = PressureFamily.power(2)
        got = energy_derivative_formula(geo, None, fam, n, grid=grid)
        fd = energy_derivative_fd(geo, None, fam, n, grid=grid)
        assert rel(got, fd.value) < 1e-4

    def test_relative_entropy_with_reference(self, setup):
        geo, grid = setup
        V = Potential.from_expr(1, x0**2 / 2 + sympy.log(sympy.sqrt(2 * sympy.pi)))
        got = energy_derivative_formula(geo, V, PressureFamily.entropy(), 2, grid=grid)
        fd = energy_derivative_fd(geo, V, PressureFamily.entropy(), 2, grid=grid)
        assert rel(got, fd.value) < 1e-5

    def test_order_two_trace_chain_form(self, setup):
        # the order-2 differential of the relative entropy in its compact form
        geo, grid = setup
        V = Potential.from_expr(1, x0**2 / 2 + sympy.log(sympy.sqrt(2 * sympy.pi)))
        got = energy_derivative_formula(geo, V, PressureFamily.entropy(), 2, grid=grid)
        want = gamma2_route(QUARTIC, V, geo.v, grid)
        assert rel(got, want) < 1e-12

    def test_order_three_closed_form(self, setup):
        geo, grid = setup
        pts = grid.points
        mu0 = mu_derivatives(QUARTIC, pts, 0).tensors[0]
        jac = geo.v.jacobian(0.0, pts)[:, 0, 0]
        want = -math.factorial(2) * float(np.sum(grid.weights * mu0 * jac**3))
        got = energy_derivative_formula(geo, None, PressureFamily.entropy(), 3, grid=grid)
        assert rel(got, want) < 1e-12

    def test_hessian_two_routes(self):
        # trace-chain route against the direct first/second-variation route
        model = isotropic_gaussian(1.3)
        grid = build_grid(model, 1e-9)
        V = Potential.from_expr(1, x0**2 / 2 + sympy.log(sympy.sqrt(2 * sympy.pi)))
        phi = VelocityField.from_exprs(1, [sympy.Rational(3, 10) * sympy.sin(x0)
                                           + sympy.Rational(1, 10) * x0**2])
        a = gamma2_route(model, V, phi, grid)
        b = second_variation_hessian_route(model, V, phi, grid)
        assert rel(a, b) < 1e-6


class TestVelocityConfig:
    def test_config_round_trip(self):
        cfg = {
            "dim": 1,
            "components": [[
                {"coeff": 0.3, "powers": [0], "trig": {"fn": "sin", "omega": 1.0}},
                {"coeff": 0.1, "powers": [2], "time_poly": [1.0, 0.5]},
            ]],
        }
        v = VelocityField.from_config(cfg)
        pts = np.array([0.7])
        got = v.value(0.5, pts)[0, 0]
        want = 0.3 * math.sin(0.7) + 0.1 * 0.49 * (1 + 0.5 * 0.5)
        assert abs(got - want) < 1e-12
