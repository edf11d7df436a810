"""Initial utilities, flow-built fields, conjugation and analytic families."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowutility import (
    DualPolicyField,
    InvalidConfigError,
    MarketSpec,
    MeasureMixture,
    PolicyField,
    build_utility_field,
    closed_form_ZN,
    conjugate_field,
    decreasing_utility,
    default_x_grid,
    dual_optimal_nu,
    generate_lattice,
    make_initial_utility,
    optimal_policy_from_field,
    simulate_scalar,
    simulate_spd_flow,
    simulate_wealth_flow,
)
from flowutility.utility import integrate_from_zero

DT = 0.02
STEPS = 50
R, B, SIG = 0.02, 0.07, 0.2
ETA = 0.25  # (B - R) / SIG
A_POW = 0.5


def market():
    return MarketSpec.constant(n=1, d=1, r=R, b=[B], sigma=[[SIG]],
                               dt=DT, n_steps=STEPS)


def merton_field(n_paths=2000, seed=7, with_generators=True):
    m = market()
    lat = generate_lattice(n_paths, STEPS, DT, 1, seed=seed)
    u = make_initial_utility("power", {"a": A_POW})
    k_star = ETA / (1.0 - A_POW)  # growth-optimal fraction times leverage
    kappa = PolicyField(lambda t, x: np.full(x.shape + (1,), k_star), name="opt")
    nu = DualPolicyField(lambda t, y: np.zeros(y.shape + (1,)), name="zero")
    xg = default_x_grid()
    X = simulate_wealth_flow(lat, m, kappa, xg)
    yg = np.geomspace(u.u_x(xg[-1]) * 0.02, u.u_x(xg[0]) * 50.0, xg.shape[0])
    Y = simulate_spd_flow(lat, m, nu, yg)
    if with_generators:
        U = build_utility_field(X, Y, u, m, kappa, nu)
    else:
        U = build_utility_field(X, Y, u)
    return m, lat, u, kappa, nu, X, Y, U


# ---------------------------------------------------------------------------
# initial utilities


def test_power_utility_derivatives_and_conjugate():
    u = make_initial_utility("power", {"a": 0.5})
    x = np.geomspace(0.1, 10.0, 9)
    np.testing.assert_allclose(u.u(x), 2.0 * np.sqrt(x), rtol=1e-14)
    np.testing.assert_allclose(u.u_x(x), x ** -0.5, rtol=1e-14)
    y = np.geomspace(0.2, 5.0, 9)
    # conjugate of x^a/a is ((1-a)/a) y^{a/(a-1)}; a = 1/2 gives 1/y
    np.testing.assert_allclose(u.conj(y), 1.0 / y, rtol=1e-12)
    np.testing.assert_allclose(u.conj_y(y), -y ** -2.0, rtol=1e-12)


def test_log_utility_risk_tolerance_is_wealth():
    u = make_initial_utility("log")
    x = np.geomspace(0.1, 10.0, 5)
    np.testing.assert_allclose(u.risk_tolerance(x), x, rtol=1e-13)


def test_exponential_utility_shape():
    u = make_initial_utility("exponential", {"c": 2.0})
    x = np.linspace(0.0, 3.0, 7)
    np.testing.assert_allclose(u.u(x), (1.0 - np.exp(-2.0 * x)) / 2.0, rtol=1e-14)
    np.testing.assert_allclose(u.u_x(x), np.exp(-2.0 * x), rtol=1e-14)


def test_power_requires_exponent_in_unit_interval():
    with pytest.raises(InvalidConfigError):
        make_initial_utility("power", {"a": 1.3})
    with pytest.raises(InvalidConfigError):
        make_initial_utility("power", {"a": -0.5})


def test_integrate_from_zero_power_tail():
    # integral_0^x z^{-1/2} dz = 2 sqrt(x): the unsampled [0, x_min] mass is
    # completed by a power-law tail fitted to the smallest grid points
    z = np.geomspace(0.05, 20.0, 64)
    g = z[None, None, :] ** -0.5
    vals = integrate_from_zero(z, g)
    rel = np.abs(vals[0, 0] - 2.0 * np.sqrt(z)) / (2.0 * np.sqrt(z))
    assert rel.max() < 2e-4


# ---------------------------------------------------------------------------
# flow-built field


def test_initial_condition_is_exact():
    _, _, u, _, _, _, _, U = merton_field(n_paths=300)
    np.testing.assert_allclose(
        U.values[:, 0, :], np.broadcast_to(u.u(U.x_grid), (300, 64)),
        rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(
        U.ux[:, 0, :], np.broadcast_to(u.u_x(U.x_grid), (300, 64)), rtol=1e-10)


def test_field_is_concave_increasing():
    _, _, _, _, _, _, _, U = merton_field(n_paths=300)
    assert (U.ux > 0).all()
    assert (np.diff(U.ux, axis=-1) < 0).all()  # strictly decreasing marginal


def test_optimal_policy_recovered_from_field():
    m, _, _, _, _, _, _, U = merton_field(n_paths=500)
    kap, q_star = optimal_policy_from_field(U, m, time_indices=[10, 40])
    k_star = ETA / (1.0 - A_POW)
    interior = slice(4, -4)
    rel = np.abs(kap[:, :, interior, 0] - k_star) / k_star
    assert rel.max() < 2e-2
    assert (q_star <= 0).all()


# ---------------------------------------------------------------------------
# conjugation


def test_fenchel_inequality_holds_exactly_on_lattice():
    _, _, _, _, _, _, _, U = merton_field(n_paths=300)
    D = conjugate_field(U)
    for k in (0, 25, 49):
        score = U.values[:, k, :, None] - U.x_grid[:, None] * D.y_grid[None, None, :]
        gap = score - D.values[:, k, None, :]
        assert gap.max() <= 1e-12


def test_inverse_pair_identity_on_interior_knots():
    _, _, _, _, _, _, _, U = merton_field(n_paths=300)
    D = conjugate_field(U)
    keep = slice(4, -4)
    xb, _ = D.evaluate_uy(U.ux[:, :, keep])
    target = np.broadcast_to(U.x_grid[keep], xb.shape)
    rel = np.abs(-xb - target) / target
    assert rel.max() < 1e-3


def test_conjugate_at_time_zero_matches_analytic_conjugate():
    _, _, u, _, _, _, _, U = merton_field(n_paths=200)
    D = conjugate_field(U)
    sat = D.saturated[:, 0, :]
    y = np.broadcast_to(D.y_grid, sat.shape)
    ok = ~sat
    rel = np.abs(D.values[:, 0, :] - u.conj(y))[ok] / np.abs(u.conj(y))[ok]
    assert rel.max() < 1e-3


def test_dual_orthogonal_policy_vanishes_in_complete_market():
    m, _, _, _, _, _, _, U = merton_field(n_paths=200)
    D = conjugate_field(U)
    nu_star = dual_optimal_nu(D, m, time_indices=[25])
    np.testing.assert_allclose(nu_star, 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# closed-form product family Z v(x/N)


def zn_exponential(mu_offset=0.0, n_paths=400, seed=13):
    m = market()
    lat = generate_lattice(n_paths, STEPS, DT, 1, seed=seed)
    u = make_initial_utility("exponential", {"c": 1.0})
    s_N = np.array([0.1])
    s_Z = np.array([0.0])

    def mu_N(t):
        return R + float(s_N @ m.eta_sigma[m.step_index(t)])

    def mu_Z(t):
        eta = m.eta_sigma[m.step_index(t)]
        return 0.5 * float(np.sum((eta - s_N + s_Z) ** 2)) + mu_offset

    Z = simulate_scalar(lat, mu_Z, lambda t: s_Z, 1.0, name="Z")
    N = simulate_scalar(lat, mu_N, lambda t: s_N, 1.0, name="N")
    return m, lat, u, closed_form_ZN(u, Z, N, m, x_grid=np.geomspace(0.05, 20.0, 48))


def test_zn_exponential_condition_report_passes():
    _, _, _, (U, cond) = zn_exponential()
    assert cond["family"] == "exponential"
    assert cond["passes"]
    assert cond["max_abs_condition"] < 1e-10
    assert cond["sigma_N_in_range"]


def test_zn_condition_flags_perturbed_growth_rate():
    _, _, _, (U, cond) = zn_exponential(mu_offset=0.1)
    assert not cond["passes"]
    np.testing.assert_allclose(cond["max_abs_condition"], 0.1, rtol=1e-10)


def test_zn_field_value_is_product_form():
    _, _, u, (U, _) = zn_exponential()
    # with sigma_Z = 0 and the consistent growth rate, Z is deterministic
    assert np.ptp(U.values[:, 0, :], axis=0).max() < 1e-14


# ---------------------------------------------------------------------------
# analytic decreasing family


def test_single_atom_matches_closed_form_primal():
    tg = np.linspace(0.0, 1.0, 51)
    yg = np.geomspace(0.05, 20.0, 64)
    mix = MeasureMixture(atoms=np.array([0.5]), weights=np.array([1.0]))
    D, P = decreasing_utility(mix, np.array([ETA]), yg, tg)
    a = 0.5  # primal power for the atom at risk aversion 1/2
    A = ETA ** 2 * tg
    oracle = P.x_grid[None, :] ** a / a * np.exp(-a / (2 * (1 - a)) * A)[:, None]
    np.testing.assert_allclose(P.values[0], oracle, rtol=1e-12)
    # dual marginal at time zero: -Utilde_y(0, y) = y^{-1/alpha}
    np.testing.assert_allclose(-D.uy[0, 0], yg ** -2.0, rtol=1e-12)


def test_single_atom_with_rate_matches_closed_form():
    tg = np.linspace(0.0, 1.0, 51)
    yg = np.geomspace(0.05, 20.0, 64)
    mix = MeasureMixture(atoms=np.array([0.5]), weights=np.array([1.0]))
    D, P = decreasing_utility(mix, np.array([ETA]), yg, tg,
                              r_path=np.full(50, R))
    a = 0.5
    A, Rt = ETA ** 2 * tg, R * tg
    oracle = (P.x_grid[None, :] ** a / a
              * np.exp(-a * Rt - a / (2 * (1 - a)) * A)[:, None])
    np.testing.assert_allclose(P.values[0], oracle, rtol=1e-12)


def test_three_atom_mixture_is_nonincreasing_in_time():
    tg = np.linspace(0.0, 1.0, 51)
    yg = np.geomspace(0.05, 20.0, 64)
    mix = MeasureMixture(atoms=np.array([0.5, 1.0, 2.0]),
                         weights=np.array([0.4, 0.3, 0.3]), log_limit=True)
    D, _ = decreasing_utility(mix, np.array([ETA]), yg, tg)
    assert np.diff(D.values[0], axis=0).max() <= 1e-12
    assert (D.uyy[0] > 0).all()  # strict convexity in y


def test_mixture_validation():
    with pytest.raises(InvalidConfigError):
        MeasureMixture(atoms=np.array([0.5]), weights=np.array([-1.0]))
    with pytest.raises(InvalidConfigError):
        # an atom at 1 needs the log-limit switch
        MeasureMixture(atoms=np.array([1.0]), weights=np.array([1.0]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 0.9), st.floats(0.05, 1.0))
def test_decreasing_dual_solves_its_drift_identity(alpha, eta):
    # the exact time derivative must equal the dual drift formula with
    # gamma = 0 for any single atom and constant premium
    tg = np.linspace(0.0, 0.5, 26)
    yg = np.geomspace(0.1, 10.0, 32)
    mix = MeasureMixture(atoms=np.array([alpha]), weights=np.array([1.0]))
    D, _ = decreasing_utility(mix, np.array([eta]), yg, tg)
    ut = D.analytic_time_derivative[0]
    y = yg[None, :]
    formula = -0.5 * eta ** 2 * y ** 2 * D.uyy[0]
    np.testing.assert_allclose(ut, formula, rtol=1e-10, atol=1e-12)
