"""Market coefficients, minimal risk premium and range(sigma) projections."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowutility import (
    ConstraintViolationError,
    InvalidConfigError,
    MarketSpec,
    NoArbitrageViolationError,
    SingularMarketError,
    minimal_risk_premium,
    project_sigma,
    spd_local_dynamics,
    wealth_local_dynamics,
)


def scalar_market(r=0.02, b=0.07, s=0.2, dt=0.01, n_steps=100):
    return MarketSpec.constant(n=1, d=1, r=r, b=[b], sigma=[[s]], dt=dt, n_steps=n_steps)


def incomplete_market(dt=0.01, n_steps=100):
    # two Brownian coordinates, one asset driven by the first coordinate only
    return MarketSpec.constant(n=2, d=1, r=0.02, b=[0.07],
                               sigma=[[0.2], [0.0]], dt=dt, n_steps=n_steps)


def test_scalar_risk_premium_oracle():
    # eta = (b - r) / sigma = (0.07 - 0.02) / 0.2 = 0.25
    m = scalar_market()
    np.testing.assert_allclose(m.eta_sigma, 0.25, rtol=1e-14)


def test_incomplete_market_risk_premium_lies_in_asset_span():
    m = incomplete_market()
    np.testing.assert_allclose(m.eta_sigma[0], [0.25, 0.0], atol=1e-14)


def test_projection_decomposes_and_is_orthogonal():
    m = incomplete_market()
    v = np.array([3.0, 4.0])
    v_sig, v_perp = project_sigma(v, 0.0, m)
    np.testing.assert_allclose(v_sig, [3.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(v_perp, [0.0, 4.0], atol=1e-12)
    assert abs(np.dot(v_sig, v_perp)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_premium_solves_system_and_lies_in_range(n, d, data):
    d = min(n, d)
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 31)))
    sigma = rng.normal(size=(n, d))
    # guarantee well-conditioned columns
    sigma += np.eye(n, d)
    r = 0.01
    w = rng.normal(scale=0.3, size=n)
    b = sigma.T @ w + r  # consistent by construction
    try:
        m = MarketSpec.constant(n=n, d=d, r=r, b=b, sigma=sigma, dt=0.1, n_steps=3)
    except SingularMarketError:
        return
    eta = minimal_risk_premium(m, 0.0)
    # defining system
    np.testing.assert_allclose(sigma.T @ eta, b - r, atol=1e-9)
    # minimum-norm solution lies in range(sigma)
    e_sig, e_perp = project_sigma(eta, 0.0, m)
    np.testing.assert_allclose(e_perp, 0.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_projection_pythagoras_and_idempotence(n, d, data):
    d = min(n, d)
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 31)))
    sigma = rng.normal(size=(n, d)) + np.eye(n, d)
    try:
        m = MarketSpec.constant(n=n, d=d, r=0.0, b=np.zeros(d), sigma=sigma,
                                dt=0.1, n_steps=2)
    except SingularMarketError:
        return
    v = rng.normal(size=n)
    v_sig, v_perp = project_sigma(v, 0.0, m)
    np.testing.assert_allclose(v_sig + v_perp, v, atol=1e-12)
    assert abs(np.dot(v_sig, v_sig) + np.dot(v_perp, v_perp)
               - np.dot(v, v)) < 1e-12 * (1.0 + np.dot(v, v))
    again, _ = project_sigma(v_sig, 0.0, m)
    np.testing.assert_allclose(again, v_sig, atol=1e-12)


def test_policy_premium_product_only_sees_range_component():
    # kappa.eta equals kappa.eta for any kappa in range(sigma): the premium
    # has no orthogonal part, so adding one to a vector changes nothing
    m = incomplete_market()
    eta = minimal_risk_premium(m, 0.0)
    kappa = np.array([0.4, 0.0])
    lifted = kappa + np.array([0.0, 7.0])
    assert abs(np.dot(kappa, eta) - np.dot(lifted, eta)) < 1e-14


def test_json_round_trip():
    m = incomplete_market(dt=0.05, n_steps=4)
    m2 = MarketSpec.from_json(m.to_json())
    np.testing.assert_array_equal(m.r, m2.r)
    np.testing.assert_array_equal(m.b, m2.b)
    np.testing.assert_array_equal(m.sigma, m2.sigma)
    assert (m.n, m.d, m.dt) == (m2.n, m2.d, m2.dt)


def test_step_index_is_piecewise_constant():
    m = scalar_market(dt=0.5, n_steps=4)
    assert m.step_index(0.0) == 0
    assert m.step_index(0.49) == 0
    assert m.step_index(0.5) == 1
    assert m.step_index(100.0) == 3  # clipped to the last step


def test_singular_sigma_rejected():
    with pytest.raises(SingularMarketError):
        MarketSpec.constant(n=2, d=2, r=0.0, b=[0.0, 0.0],
                            sigma=[[1.0, 1.0], [1.0, 1.0]], dt=0.1, n_steps=2)


def test_unsolvable_premium_system_rejected():
    # d > n cannot be represented at all
    with pytest.raises(InvalidConfigError):
        MarketSpec.constant(n=1, d=2, r=0.0, b=[0.1, 0.2],
                            sigma=[[0.2, 0.3]], dt=0.1, n_steps=2)


def test_excess_return_outside_span_rejected():
    # two assets, both driven by the same Brownian direction, with excess
    # returns that no single premium can explain
    with pytest.raises((NoArbitrageViolationError, SingularMarketError)):
        MarketSpec.constant(n=2, d=2, r=0.0, b=[0.05, 0.30],
                            sigma=[[0.2, 0.2], [0.0, 1e-12]], dt=0.1, n_steps=2)


def test_wealth_dynamics_oracle():
    m = scalar_market()
    drift, vol = wealth_local_dynamics(np.array([2.0]), np.array([0.5]), 0.0, m)
    # x (r + kappa.eta) = 2 (0.02 + 0.5*0.25) = 0.29
    np.testing.assert_allclose(drift, [0.29], rtol=1e-14)
    np.testing.assert_allclose(vol, [[1.0]], rtol=1e-14)


def test_density_dynamics_oracle_and_orthogonality_guard():
    m = incomplete_market()
    drift, vol = spd_local_dynamics(np.array([1.0]), np.array([0.0, 0.3]), 0.0, m)
    np.testing.assert_allclose(drift, [-0.02], rtol=1e-12)
    np.testing.assert_allclose(vol, [[-0.25, 0.3]], atol=1e-12)
    with pytest.raises(ConstraintViolationError):
        spd_local_dynamics(np.array([1.0]), np.array([0.3, 0.0]), 0.0, m)


def test_wealth_policy_must_lie_in_span():
    m = incomplete_market()
    with pytest.raises(ConstraintViolationError):
        wealth_local_dynamics(np.array([1.0]), np.array([0.0, 0.5]), 0.0, m)
