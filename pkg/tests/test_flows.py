"""Flow inversion, composition and inverse-flow dynamics."""

import numpy as np
import pytest

from flowutility import (
    DualPolicyField,
    FlowBundle,
    MarketSpec,
    NonInvertibleFlowError,
    PolicyField,
    audit_monotone,
    compose_flows,
    flow_initial_derivative,
    generate_lattice,
    inverse_flow_dynamics_residual,
    invert_flow,
    simulate_wealth_flow,
)

DT = 0.01
STEPS = 50


def market():
    return MarketSpec.constant(n=1, d=1, r=0.05, b=[0.09], sigma=[[0.2]],
                               dt=DT, n_steps=STEPS)


def merton_flow(n_paths=300, seed=17):
    m = market()
    lat = generate_lattice(n_paths, STEPS, DT, 1, seed=seed)
    kappa = PolicyField(lambda t, x: np.full(x.shape + (1,), 0.4), name="constant")
    grid = np.geomspace(0.1, 10.0, 24)
    return m, lat, simulate_wealth_flow(lat, m, kappa, grid)


def test_audit_passes_on_simulated_flow():
    _, _, X = merton_flow()
    audit = audit_monotone(X)
    assert audit.passed
    assert audit.violations.sum() == 0
    assert audit.worst_ratio > 1.0


def test_audit_and_inversion_reject_crossing_curves():
    _, _, X = merton_flow(n_paths=5)
    bad = X.values.copy()
    bad[2, 10, 5] = bad[2, 10, 6] * 1.5  # break ordering on one path
    broken = FlowBundle(role=X.role, grid=X.grid, values=bad, dt=X.dt,
                        lattice_ref=X.lattice_ref, policy_ref=X.policy_ref)
    audit = audit_monotone(broken)
    assert not audit.passed
    assert audit.violations[2, 10] > 0
    with pytest.raises(NonInvertibleFlowError) as exc:
        invert_flow(broken, X.grid)
    assert 2 in exc.value.offending_paths


def test_inverse_of_deterministic_flow_is_exact():
    # zero-volatility flow X(t, x) = x e^{rt} inverts to z e^{-rt}; the
    # curves are linear in x, so shape-preserving interpolation is exact
    m = market()
    lat = generate_lattice(50, STEPS, DT, 1, seed=1)
    kappa = PolicyField(lambda t, x: np.zeros(x.shape + (1,)), name="zero")
    grid = np.geomspace(0.1, 10.0, 24)
    X = simulate_wealth_flow(lat, m, kappa, grid)
    z = np.geomspace(0.2, 5.0, 11)
    inv = invert_flow(X, z)
    t = np.arange(STEPS + 1) * DT
    expected = z[None, None, :] * np.exp(-0.05 * t)[None, :, None]
    np.testing.assert_allclose(inv.values, np.broadcast_to(expected, inv.values.shape),
                               rtol=1e-12)
    assert not inv.extrapolated[:, :, 2:-2].any()


def test_inversion_round_trip_on_stochastic_flow():
    _, _, X = merton_flow()
    z = np.geomspace(0.3, 4.0, 9)
    inv = invert_flow(X, z)
    back, flags = compose_flows(X, inv.values)
    ok = ~(flags | inv.extrapolated)
    rel = np.abs(back - z[None, None, :]) / z[None, None, :]
    assert rel[ok].max() < 1e-7


def test_initial_derivative_of_geometric_flow():
    # geometric flows are linear in the initial condition: dX/dx = X/x
    _, _, X = merton_flow(n_paths=40)
    deriv = flow_initial_derivative(X)
    expected = X.values / X.grid
    np.testing.assert_allclose(deriv, expected, rtol=1e-9)


def test_inverse_flow_dynamics_residual_shrinks_with_dt():
    # first-order convergence evidence at unit-test scale: halving dt should
    # shrink the accumulated pathwise gap by roughly half
    m0 = market()
    gaps = []
    for mult in (1, 2):
        steps = STEPS * mult
        dt = DT / mult
        m = MarketSpec.constant(n=1, d=1, r=0.05, b=[0.09], sigma=[[0.2]],
                                dt=dt, n_steps=steps)
        lat = generate_lattice(400, steps, dt, 1, seed=23)
        kappa = PolicyField(lambda t, x: np.full(x.shape + (1,), 0.4), name="constant")
        grid = np.geomspace(0.1, 10.0, 24)
        X = simulate_wealth_flow(lat, m, kappa, grid)
        inv = invert_flow(X, np.geomspace(0.4, 3.0, 7))

        def mu_fn(t, x):
            # risk premium (b - r)/sigma = 0.2, so drift x (r + kappa eta)
            return x * (0.05 + 0.4 * 0.2)

        def vol_fn(t, x):
            return x[..., None] * 0.4

        rep = inverse_flow_dynamics_residual(X, inv, lat, mu_fn, vol_fn)
        gaps.append(rep.extra["mean_step_residual"])
    assert gaps[1] < gaps[0]
    assert 1.4 < gaps[0] / gaps[1] < 3.0


def test_compose_requires_coupled_lattices():
    _, _, X = merton_flow(seed=4)
    _, _, other = merton_flow(seed=5)
    from flowutility import CouplingError

    with pytest.raises(CouplingError):
        compose_flows(X, other)
