"""Ito market model: coefficients, minimal risk premium, range(sigma) projections.

Coefficients are piecewise constant in time, sampled on the simulation grid
(one value per Euler step).  The minimal risk premium eta_sigma is the
minimum-norm solution of sigma' eta = b - r 1, which automatically lies in
range(sigma); projections use an SVD pseudo-inverse with relative cutoff
1e-10 so near-rank-deficiency degrades gracefully into an explicit error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from .errors import (
    ConstraintViolationError,
    InvalidConfigError,
    NoArbitrageViolationError,
    SingularMarketError,
)

SVD_CUTOFF = 1e-10
RANGE_TOL = 1e-8


@dataclass(frozen=True)
class MarketSpec:
    """Sampled market coefficients on a uniform step grid.

    r has shape (n_steps,), b (n_steps, d), sigma (n_steps, n, d).
    eta_sigma (n_steps, n) and the orthogonal projectors onto range(sigma)
    (n_steps, n, n) are derived at construction.
    """

    n: int
    d: int
    dt: float
    r: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    eta_sigma: np.ndarray = field(init=False)
    proj: np.ndarray = field(init=False)

    def __post_init__(self):
        r = np.ascontiguousarray(np.atleast_1d(np.asarray(self.r, dtype=np.float64)))
        b = np.ascontiguousarray(np.asarray(self.b, dtype=np.float64))
        sigma = np.ascontiguousarray(np.asarray(self.sigma, dtype=np.float64))
        if self.d > self.n:
            raise InvalidConfigError(f"asset count d={self.d} exceeds Brownian dimension n={self.n}")
        if self.dt <= 0:
            raise InvalidConfigError("dt must be positive")
        n_steps = r.shape[0]
        if b.shape != (n_steps, self.d) or sigma.shape != (n_steps, self.n, self.d):
            raise InvalidConfigError(
                f"coefficient shapes r{r.shape} b{b.shape} sigma{sigma.shape} "
                f"inconsistent with n={self.n}, d={self.d}"
            )
        if not (np.isfinite(r).all() and np.isfinite(b).all() and np.isfinite(sigma).all()):
            raise InvalidConfigError("market coefficients must be finite")
        u, s, _ = np.linalg.svd(sigma, full_matrices=False)
        smax = s.max(axis=-1)
        if (s.min(axis=-1) <= SVD_CUTOFF * smax).any():
            raise SingularMarketError("sigma' sigma is singular at some step (relative cutoff 1e-10)")
        # projector onto range(sigma) and min-norm solution of sigma' eta = b - r 1
        proj = u @ np.swapaxes(u, -1, -2)
        excess = b - r[:, None]
        eta = np.einsum("tij,tj->ti", np.linalg.pinv(np.swapaxes(sigma, -1, -2), rcond=SVD_CUTOFF), excess)
        gap = np.einsum("tij,ti->tj", sigma, eta) - excess
        scale = 1.0 + np.abs(excess).max()
        if np.abs(gap).max() > 1e-8 * scale:
            raise NoArbitrageViolationError("sigma' eta = b - r 1 has no solution within tolerance")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "eta_sigma", eta)
        object.__setattr__(self, "proj", proj)

    @property
    def n_steps(self) -> int:
        return self.r.shape[0]

    def step_index(self, t) -> np.ndarray:
        """Map time(s) to the piecewise-constant coefficient step."""
        idx = np.floor(np.asarray(t, dtype=np.float64) / self.dt + 1e-12).astype(np.int64)
        return np.clip(idx, 0, self.n_steps - 1)

    @classmethod
    def constant(cls, n, d, r, b, sigma, dt, n_steps) -> "MarketSpec":
        """Market with time-independent coefficients replicated over the grid."""
        r_arr = np.full(n_steps, float(r))
        b_arr = np.tile(np.reshape(np.asarray(b, dtype=np.float64), (1, d)), (n_steps, 1))
        s_arr = np.tile(np.reshape(np.asarray(sigma, dtype=np.float64), (1, n, d)), (n_steps, 1, 1))
        return cls(n=n, d=d, dt=dt, r=r_arr, b=b_arr, sigma=s_arr)

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "d": self.d,
            "dt": self.dt,
            "r": self.r.tolist(),
            "b": self.b.tolist(),
            "sigma": self.sigma.tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MarketSpec":
        doc = json.loads(text)
        return cls(n=doc["n"], d=doc["d"], dt=doc["dt"],
                   r=np.asarray(doc["r"]), b=np.asarray(doc["b"]), sigma=np.asarray(doc["sigma"]))


def project_sigma(v, t, market: MarketSpec):
    """Orthogonal decomposition v = v_sigma + v_perp w.r.t. range(sigma_t).

    v may carry leading batch axes; the last axis has length n.  When t is an
    array its shape must broadcast against the batch axes of v.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise InvalidConfigError("cannot project non-finite vector")
    idx = market.step_index(t)
    p = market.proj[idx]
    v_sigma = np.einsum("...ij,...j->...i", p, v)
    return v_sigma, v - v_sigma


def minimal_risk_premium(market: MarketSpec, t) -> np.ndarray:
    """The minimum-norm eta with sigma_t' eta = b_t - r_t 1 (lies in range(sigma))."""
    return market.eta_sigma[market.step_index(t)]


def _check_in_range(vec, t, market, perp: bool, what: str):
    v_sigma, v_perp = project_sigma(vec, t, market)
    bad = v_sigma if perp else v_perp
    scale = 1.0 + np.sqrt(np.sum(np.asarray(vec, dtype=np.float64) ** 2, axis=-1))
    if (np.sqrt(np.sum(bad * bad, axis=-1)) > RANGE_TOL * scale).any():
        side = "orthogonal complement of range(sigma)" if perp else "range(sigma)"
        raise ConstraintViolationError(f"{what} leaves the {side} beyond tolerance")


def wealth_local_dynamics(x, kappa, t, market: MarketSpec):
    """Drift and volatility of dX = X [r dt + kappa.(dW + eta_sigma dt)].

    Returns (drift, vol) = (x (r + kappa.eta_sigma), x kappa).
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    _check_in_range(kappa, t, market, perp=False, what="kappa")
    x = np.asarray(x, dtype=np.float64)
    eta = minimal_risk_premium(market, t)
    r = market.r[market.step_index(t)]
    drift = x * (r + np.sum(kappa * eta, axis=-1))
    vol = x[..., None] * kappa if x.ndim else x * kappa
    return drift, vol


def spd_local_dynamics(y, nu, t, market: MarketSpec):
    """Drift and volatility of dY = Y [-r dt + (nu - eta_sigma).dW].

    Returns (drift, vol) = (-y r, y (nu - eta_sigma)).
    """
    nu = np.asarray(nu, dtype=np.float64)
    _check_in_range(nu, t, market, perp=True, what="nu")
    y = np.asarray(y, dtype=np.float64)
    eta = minimal_risk_premium(market, t)
    r = market.r[market.step_index(t)]
    drift = -y * r
    vol = y[..., None] * (nu - eta) if y.ndim else y * (nu - eta)
    return drift, vol
