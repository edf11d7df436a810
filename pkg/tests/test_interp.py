"""Shape-preserving interpolation primitives against scipy and exact curves."""

import numpy as np
import pytest
from scipy.interpolate import PchipInterpolator

from flowutility.errors import RangeError
from flowutility.interp import (
    batched_searchsorted,
    hermite_eval,
    monotone_eval,
    pchip_slopes,
)

RNG = np.random.default_rng(20240811)


def test_batched_searchsorted_matches_numpy_per_row():
    a = np.sort(RNG.uniform(0.0, 10.0, size=(37, 23)), axis=-1)
    v = RNG.uniform(-1.0, 11.0, size=(37, 15))
    got = batched_searchsorted(a, v)
    for i in range(a.shape[0]):
        expected = np.searchsorted(a[i], v[i], side="right")
        np.testing.assert_array_equal(got[i], expected)


def test_batched_searchsorted_handles_ties_like_numpy():
    a = np.array([[0.0, 1.0, 1.0, 2.0, 3.0]])
    v = np.array([[1.0, 2.0, 3.0, -1.0, 4.0]])
    np.testing.assert_array_equal(
        batched_searchsorted(a, v)[0],
        np.searchsorted(a[0], v[0], side="right"))


def test_pchip_slopes_match_scipy():
    x = np.sort(RNG.uniform(0.1, 5.0, size=16))
    y = np.cumsum(RNG.uniform(0.05, 1.0, size=16))  # strictly increasing
    d = pchip_slopes(x, y)
    ref = PchipInterpolator(x, y).derivative()(x)
    np.testing.assert_allclose(d, ref, rtol=1e-12, atol=1e-12)


def test_hermite_eval_matches_scipy_off_knots():
    x = np.geomspace(0.1, 10.0, 20)
    y = np.log1p(x) + 0.3 * x  # smooth increasing
    d = pchip_slopes(x, y)
    xq = np.geomspace(0.12, 9.5, 57)
    ref = PchipInterpolator(x, y)(xq)
    got = hermite_eval(x, y, d, xq)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_monotone_eval_is_exact_at_knots():
    x = np.geomspace(0.05, 20.0, 32)
    y = 2.0 * np.sqrt(x)
    vals, flags = monotone_eval(x, y, x)
    np.testing.assert_allclose(vals, y, rtol=1e-14)
    assert not flags.any()


def test_monotone_eval_preserves_order_between_knots():
    x = np.geomspace(0.05, 20.0, 32)
    y = 2.0 * np.sqrt(x)
    xq = np.geomspace(0.06, 19.0, 301)
    vals, _ = monotone_eval(x, y, xq)
    assert (np.diff(vals) > 0).all()


def test_loglog_extrapolation_exact_on_power_laws():
    # a pure power law is linear in log-log coordinates, so the power-law
    # tail continuation must reproduce it exactly outside the grid
    x = np.geomspace(0.5, 2.0, 16)
    y = 3.0 * x ** 2.3
    xq = np.array([0.01, 0.1, 5.0, 50.0])
    vals, flags = monotone_eval(x, y, xq, extrapolation="loglog")
    np.testing.assert_allclose(vals, 3.0 * xq ** 2.3, rtol=1e-12)
    assert flags.all()


def test_log_space_interpolation_exact_on_power_laws_off_knots():
    x = np.geomspace(0.05, 20.0, 16)
    y = 0.7 * x ** -1.5
    xq = np.geomspace(0.07, 15.0, 113)
    vals, _ = monotone_eval(x[::-1], y[::-1], xq[::-1], log_space=True)
    np.testing.assert_allclose(vals, 0.7 * xq[::-1] ** -1.5, rtol=1e-12)


def test_extrapolation_error_mode_raises():
    x = np.linspace(1.0, 2.0, 8)
    y = x ** 2
    with pytest.raises(RangeError):
        monotone_eval(x, y, np.array([0.5]), extrapolation="error")


def test_extrapolation_clip_mode_clamps_to_edges():
    x = np.linspace(1.0, 2.0, 8)
    y = x ** 2
    vals, flags = monotone_eval(x, y, np.array([0.5, 3.0]), extrapolation="clip")
    np.testing.assert_allclose(vals, [1.0, 4.0])
    assert flags.all()


def test_batched_curves_with_broadcast_queries():
    x = np.geomspace(0.1, 10.0, 24)
    curves = np.stack([2.0 * np.sqrt(x), 3.0 * np.sqrt(x)])[:, None, :]  # (2,1,24)
    xq = np.geomspace(0.2, 8.0, 11)[None, None, :]
    vals, _ = monotone_eval(x, curves, xq)
    np.testing.assert_allclose(vals[0, 0] * 1.5, vals[1, 0], rtol=1e-12)
