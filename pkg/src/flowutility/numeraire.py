"""Change of numeraire: markets, wealth bundles and utility fields.

Dividing wealth by a positive reference process N (with per-unit drift mu_N
and volatility delta_N) produces a new market with short rate
r_hat = r - mu_N + delta_N^sigma . eta_sigma and risk premium
eta_hat = eta_sigma - delta_N.  Consistency is preserved: V(t,x) = U(t, x N_t)
is a utility field in the hatted market and U(t, X_t) = V(t, X_t / N_t)
pathwise.  The numeraire portfolio N = 1/Y0 removes both the rate and the
premium (martingale market).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError
from .lattice import BrownianLattice, FlowBundle, require_coupled
from .market import MarketSpec, project_sigma
from .utility import UtilityField, _interp_components, _eval_planes


@dataclass
class NumeraireSpec:
    """Coupled samples of a positive reference process with its coefficients."""

    values: np.ndarray  # (n_paths, n_times), > 0
    mu_samples: np.ndarray  # (n_steps,)
    delta_samples: np.ndarray  # (n_steps, n)
    lattice_ref: tuple
    name: str = "numeraire"

    def __post_init__(self):
        if (self.values <= 0).any():
            raise InvalidConfigError("numeraire must be positive pathwise")

    def delta_in_range(self, market: MarketSpec, tol=1e-8) -> bool:
        for k in range(self.delta_samples.shape[0]):
            _, perp = project_sigma(self.delta_samples[k], k * market.dt, market)
            if np.linalg.norm(perp) > tol * (1 + np.linalg.norm(self.delta_samples[k])):
                return False
        return True

    @classmethod
    def from_scalar_bundle(cls, bundle: FlowBundle, name=None) -> "NumeraireSpec":
        if bundle.mu_samples is None or bundle.vol_samples is None:
            raise InvalidConfigError("bundle must carry recorded coefficients")
        return cls(values=bundle.values[:, :, 0], mu_samples=bundle.mu_samples,
                   delta_samples=bundle.vol_samples, lattice_ref=bundle.lattice_ref,
                   name=name or bundle.policy_ref)


def numeraire_portfolio(market: MarketSpec, lattice: BrownianLattice) -> NumeraireSpec:
    """N = 1/Y0: per-unit drift r + ||eta||^2, volatility eta_sigma.

    Integrated in log space on the shared lattice, so N is the exact pathwise
    reciprocal of the log-Euler minimal state price density.
    """
    n_steps = lattice.n_steps
    mu = np.empty(n_steps)
    delta = np.empty((n_steps, market.n))
    log_n = np.zeros(lattice.n_paths)
    values = np.empty((lattice.n_paths, n_steps + 1))
    values[:, 0] = 1.0
    for k in range(n_steps):
        eta = market.eta_sigma[k]
        mu[k] = market.r[k] + eta @ eta
        delta[k] = eta
        log_n += (mu[k] - 0.5 * eta @ eta) * lattice.dt
        log_n += lattice.increments[:, k, :] @ eta
        values[:, k + 1] = np.exp(log_n)
    return NumeraireSpec(values=values, mu_samples=mu, delta_samples=delta,
                         lattice_ref=lattice.ref, name="1/Y0")


def change_numeraire_market(market: MarketSpec, numeraire: NumeraireSpec):
    """Hatted market with r_hat = r - mu_N + delta^sigma.eta, eta_hat = eta - delta.

    Returns (hatted MarketSpec, info dict).  When delta_N has a component
    orthogonal to range(sigma) the admissible set is translated rather than
    mapped onto itself; that is recorded, not resolved, here.
    """
    n_steps = market.n_steps
    r_hat = np.empty(n_steps)
    b_hat = np.empty((n_steps, market.d))
    translated = False
    for k in range(n_steps):
        t = k * market.dt
        eta = market.eta_sigma[k]
        kk = min(k, numeraire.delta_samples.shape[0] - 1)
        delta = numeraire.delta_samples[kk]
        d_sig, d_perp = project_sigma(delta, t, market)
        if np.linalg.norm(d_perp) > 1e-12 * (1 + np.linalg.norm(delta)):
            translated = True
        r_hat[k] = market.r[k] - numeraire.mu_samples[kk] + d_sig @ eta
        eta_hat_sigma = eta - d_sig
        b_hat[k] = r_hat[k] + market.sigma[k].T @ eta_hat_sigma
    hatted = MarketSpec(n=market.n, d=market.d, dt=market.dt,
                        r=r_hat, b=b_hat, sigma=market.sigma.copy())
    return hatted, {"constraint_translated": translated}


def transform_wealth(bundle: FlowBundle, numeraire: NumeraireSpec) -> FlowBundle:
    """X_hat = X / N pathwise; initial grid rescales by N_0."""
    require_coupled(bundle, numeraire)
    n0 = numeraire.values[:, 0]
    if not np.allclose(n0, n0[0]):
        raise InvalidConfigError("numeraire must start from a common value")
    values = bundle.values / numeraire.values[:, :, None]
    return FlowBundle(role=bundle.role, grid=bundle.grid / n0[0], values=values,
                      dt=bundle.dt, lattice_ref=bundle.lattice_ref,
                      policy_ref=f"{bundle.policy_ref}/{numeraire.name}")


class _NumeraireGammaSource:
    """gamma_V(t,x) = gamma_U(t, x N_t) + x V_x delta_N, chain rule in x."""

    def __init__(self, base: UtilityField, numeraire: NumeraireSpec):
        self.base = base
        self.numeraire = numeraire

    def slices(self, field, k):
        num = self.numeraire
        n_t = num.values[:, k][:, None]
        xq = field.x_grid * n_t  # (n_paths, n_grid)
        g_u, g_ux = self.base.gamma_slices(k)
        g_at = _interp_components(self.base.x_grid, g_u, xq)
        gx_at = _interp_components(self.base.x_grid, g_ux, xq)
        kk = min(k, num.delta_samples.shape[0] - 1)
        delta = num.delta_samples[kk]
        vx = field.ux[:, k, :]
        vxx = field.uxx[:, k, :]
        x = field.x_grid
        gamma = g_at + (x * vx)[..., None] * delta
        gamma_x = n_t[..., None] * gx_at + (vx + x * vxx)[..., None] * delta
        return gamma, gamma_x


class TransformedUtilityField(UtilityField):
    """V(t,x) = U(t, x N_t); evaluation composes through the base field.

    Compositional evaluation keeps the pathwise transport identity
    U(t, X_t) = V(t, X_t / N_t) exact to rounding instead of interpolation
    tolerance.
    """

    def __init__(self, base: UtilityField, numeraire: NumeraireSpec, **kwargs):
        super().__init__(**kwargs)
        self.base = base
        self.numeraire = numeraire

    def _lift(self, x, time_index):
        n = self.numeraire.values if time_index is None else self.numeraire.values[:, time_index]
        x = np.asarray(x, dtype=np.float64)
        if x.ndim > n.ndim:
            n = n[..., None]
        return x * n

    def evaluate(self, x, time_index=None, extrapolation="loglog"):
        return self.base.evaluate(self._lift(x, time_index), time_index, extrapolation)

    def evaluate_ux(self, x, time_index=None, extrapolation="loglog"):
        n = self.numeraire.values if time_index is None else self.numeraire.values[:, time_index]
        vals, flags = self.base.evaluate_ux(self._lift(x, time_index), time_index, extrapolation)
        if np.asarray(x).ndim > n.ndim:
            n = n[..., None]
        return vals * n, flags


def transform_utility(U: UtilityField, numeraire: NumeraireSpec,
                      x_grid=None) -> TransformedUtilityField:
    """Tabulate V(t,x) = U(t, x N_t) with chain-rule derivative planes.

    The planes are interpolated from the base field (a percentile
    coverage is checked); evaluation at sample points is compositional.
    """
    require_coupled(U, numeraire)
    x = np.asarray(x_grid, dtype=np.float64) if x_grid is not None else U.x_grid.copy()
    n_vals = numeraire.values[:, :, None]
    lo, hi = np.quantile(numeraire.values, [0.01, 0.99])
    if x[0] * lo < U.x_grid[0] or x[-1] * hi > U.x_grid[-1]:
        from .errors import RangeError

        raise RangeError(
            "x grid times the numeraire 1st-99th percentile leaves the sampled field; "
            "widen the base grid or shrink the transform grid")
    xq = x * n_vals  # (n_paths, n_times, n_grid)
    values, fl_v = _eval_planes(U.x_grid, U.values, xq, None, "loglog")
    ux_at, fl_u = _eval_planes(U.x_grid, U.ux, xq, None, "loglog")
    uxx_at, _ = _eval_planes(U.x_grid, U.uxx, xq, None, "loglog")
    vx = ux_at * n_vals
    vxx = uxx_at * n_vals ** 2
    field = TransformedUtilityField(
        base=U, numeraire=numeraire,
        x_grid=x, values=values, ux=vx, uxx=vxx, dt=U.dt,
        lattice_ref=U.lattice_ref, provenance=U.provenance,
        gamma_source=None, extrapolated=fl_v | fl_u)
    if U.has_gamma:
        field.gamma_source = _NumeraireGammaSource(U, numeraire)
    return field
