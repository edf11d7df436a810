"""Shared Brownian lattice and log-Euler integration of the flow SDEs.

One lattice of Gaussian increments drives every simulated flow (wealth X*,
state price densities Y^nu, auxiliary scalars Z and N), so that pathwise
compositions later on are exact couplings.  All positive processes are
advanced in log space, which is exact for constant coefficients and keeps
positivity as a hard invariant rather than a hope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CouplingError, InvalidConfigError, SimulationBlowupError
from .market import MarketSpec, minimal_risk_premium, project_sigma, RANGE_TOL


@dataclass(frozen=True)
class PolicyField:
    """Wealth volatility weight kappa(t, x) constrained to range(sigma_t).

    ``kappa`` maps (t, x) with x of shape (n_paths, n_grid) to an array
    broadcastable to (n_paths, n_grid, n).
    """

    kappa: Callable[[float, np.ndarray], np.ndarray]
    name: str = "kappa"


@dataclass(frozen=True)
class DualPolicyField:
    """Density volatility parameter nu(t, y) constrained orthogonal to range(sigma_t)."""

    nu: Callable[[float, np.ndarray], np.ndarray]
    name: str = "nu"


@dataclass(frozen=True)
class BrownianLattice:
    """n-dimensional Brownian increments on a (path, step) grid."""

    n_paths: int
    n_steps: int
    dt: float
    dim: int
    seed: int
    increments: np.ndarray  # (n_paths, n_steps, dim), variance dt per entry

    @property
    def ref(self):
        return (self.seed, self.n_paths, self.n_steps, self.dim, round(self.dt, 15))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass
class FlowBundle:
    """Samples of a monotone flow on (path, time, initial-condition grid)."""

    role: str  # wealth | spd | scalar | inverse | utility | dual
    grid: np.ndarray  # (n_grid,), strictly increasing, > 0
    values: np.ndarray  # (n_paths, n_steps + 1, n_grid)
    dt: float
    lattice_ref: tuple
    policy_ref: str = ""
    # recorded per-unit local characteristics for scalar bundles (ZN families)
    mu_samples: Optional[np.ndarray] = None  # (n_steps,)
    vol_samples: Optional[np.ndarray] = None  # (n_steps, dim)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_times) * self.dt


def require_coupled(*objs):
    """Raise unless every bundle/lattice argument shares one Brownian lattice."""
    refs = {o.ref if isinstance(o, BrownianLattice) else o.lattice_ref for o in objs}
    if len(refs) > 1:
        raise CouplingError(f"objects built from different lattices combined: {sorted(refs)}")


def generate_lattice(n_paths, n_steps, dt, dim, seed) -> BrownianLattice:
    """Reproducible i.i.d. Gaussian(0, dt) increments; same seed, same lattice."""
    if n_paths < 1 or n_steps < 1 or dim < 1:
        raise InvalidConfigError("n_paths, n_steps and dim must all be >= 1")
    if not dt > 0:
        raise InvalidConfigError("dt must be positive")
    rng = np.random.default_rng(seed)
    inc = rng.standard_normal((n_paths, n_steps, dim)) * np.sqrt(dt)
    return BrownianLattice(n_paths=n_paths, n_steps=n_steps, dt=float(dt),
                           dim=dim, seed=int(seed), increments=inc)


def _blowup_location(arr):
    bad = ~np.isfinite(arr)
    path = int(np.argwhere(bad)[0][0])
    return path


def _step_range_check(vec, t, market, perp, what, step):
    v_sigma, v_perp = project_sigma(vec, t, market)
    bad = v_sigma if perp else v_perp
    norm = np.sqrt(np.sum(bad * bad, axis=-1))
    scale = 1.0 + np.sqrt(np.sum(vec * vec, axis=-1))
    if (norm > RANGE_TOL * scale).any():
        from .errors import ConstraintViolationError

        side = "range(sigma)-orthogonal" if perp else "range(sigma)"
        raise ConstraintViolationError(f"{what} leaves the {side} subspace at step {step}")


def simulate_wealth_flow(lattice: BrownianLattice, market: MarketSpec,
                         kappa: PolicyField, x_grid, check_range=True) -> FlowBundle:
    """Integrate dX = X [r dt + kappa(t,X).(dW + eta_sigma dt)] over an x grid.

    Log-Euler: log X advances by (r + kappa.eta - ||kappa||^2/2) dt + kappa.dW
    with kappa evaluated at the pre-step wealth.
    """
    x_grid = np.asarray(x_grid, dtype=np.float64)
    if x_grid.ndim != 1 or (np.diff(x_grid) <= 0).any() or (x_grid <= 0).any():
        raise InvalidConfigError("x_grid must be 1-d, strictly increasing and positive")

    def drift_vol(t, x, step):
        k = np.asarray(kappa.kappa(t, x), dtype=np.float64)
        if not np.isfinite(k).all():
            raise SimulationBlowupError("non-finite kappa evaluation",
                                        path=_blowup_location(k), step=step)
        k = np.broadcast_to(k, x.shape + (lattice.dim,))
        if check_range:
            _step_range_check(k, t, market, perp=False, what=kappa.name, step=step)
        eta = minimal_risk_premium(market, t)
        r = market.r[market.step_index(t)]
        return r + np.einsum("...i,i->...", k, eta), k

    return _integrate(lattice, x_grid, drift_vol, role="wealth", policy_ref=kappa.name)


def simulate_spd_flow(lattice: BrownianLattice, market: MarketSpec,
                      nu: DualPolicyField, y_grid, check_range=True) -> FlowBundle:
    """Integrate dY = Y [-r dt + (nu(t,Y) - eta_sigma).dW] over a y grid."""
    y_grid = np.asarray(y_grid, dtype=np.float64)
    if y_grid.ndim != 1 or (np.diff(y_grid) <= 0).any() or (y_grid <= 0).any():
        raise InvalidConfigError("y_grid must be 1-d, strictly increasing and positive")

    def drift_vol(t, y, step):
        v = np.asarray(nu.nu(t, y), dtype=np.float64)
        if not np.isfinite(v).all():
            raise SimulationBlowupError("non-finite nu evaluation",
                                        path=_blowup_location(v), step=step)
        v = np.broadcast_to(v, y.shape + (lattice.dim,))
        if check_range:
            _step_range_check(v, t, market, perp=True, what=nu.name, step=step)
        eta = minimal_risk_premium(market, t)
        r = market.r[market.step_index(t)]
        return np.full(y.shape, -r), v - eta

    return _integrate(lattice, y_grid, drift_vol, role="spd", policy_ref=nu.name)


def simulate_scalar(lattice: BrownianLattice, mu_fn, vol_fn, init,
                    name="scalar") -> FlowBundle:
    """Geometric dynamics dS/S = mu(t) dt + vol(t).dW from a single start value.

    ``mu_fn``/``vol_fn`` are deterministic functions of time; their sampled
    values are recorded on the bundle so closed-form constructions can reuse
    the exact coefficients the simulation saw.
    """
    if not init > 0:
        raise InvalidConfigError("init must be positive")
    mu_s = np.array([float(mu_fn(k * lattice.dt)) for k in range(lattice.n_steps)])
    vol_s = np.array([np.broadcast_to(np.asarray(vol_fn(k * lattice.dt), dtype=np.float64),
                                      (lattice.dim,)) for k in range(lattice.n_steps)])

    def drift_vol(t, s, step):
        return np.full(s.shape, mu_s[step]), np.broadcast_to(vol_s[step], s.shape + (lattice.dim,))

    bundle = _integrate(lattice, np.array([float(init)]), drift_vol,
                        role="scalar", policy_ref=name)
    bundle.mu_samples = mu_s
    bundle.vol_samples = vol_s
    return bundle


def _integrate(lattice, grid, drift_vol, role, policy_ref):
    """Shared log-Euler loop; drift_vol(t, state, step) -> (per-unit drift, vol)."""
    n_grid = grid.shape[0]
    values = np.empty((lattice.n_paths, lattice.n_steps + 1, n_grid))
    values[:, 0, :] = grid
    log_state = np.broadcast_to(np.log(grid), (lattice.n_paths, n_grid)).copy()
    state = values[:, 0, :].copy()
    for step in range(lattice.n_steps):
        t = step * lattice.dt
        mu, vol = drift_vol(t, state, step)
        dw = lattice.increments[:, step, :][:, None, :]
        log_state += (mu - 0.5 * np.sum(vol * vol, axis=-1)) * lattice.dt
        log_state += np.sum(vol * dw, axis=-1)
        if not np.isfinite(log_state).all():
            raise SimulationBlowupError(f"{role} flow blew up",
                                        path=_blowup_location(log_state), step=step)
        state = np.exp(log_state)
        values[:, step + 1, :] = state
    return FlowBundle(role=role, grid=grid.copy(), values=values, dt=lattice.dt,
                      lattice_ref=lattice.ref, policy_ref=policy_ref)
