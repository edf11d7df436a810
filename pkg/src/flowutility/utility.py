"""Utility random fields and their duals.

Construction routes:

* flow-built  — U(t,x) = integral_0^x Y*(t, u_x(Xinv(t,z))) dz from coupled
  wealth and density flows (the general construction);
* closed-form — U(t,x) = Z_t v(x / N_t) families with their sufficient
  consistency conditions;
* analytic    — zero-volatility (decreasing) fields given by finite mixtures
  of power utilities with a time decay driven by the accumulated squared
  risk premium.

Volatility planes (gamma, gamma_x) are assembled lazily per time slice to
keep memory bounded; each construction attaches a source object knowing how.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidConfigError, InvalidFieldError
from .interp import monotone_eval, pchip_slopes, hermite_eval, batched_searchsorted
from .lattice import FlowBundle, PolicyField, DualPolicyField, require_coupled
from .market import MarketSpec, project_sigma

_PATH_CHUNK = 512


# ---------------------------------------------------------------------------
# initial utilities


@dataclass(frozen=True)
class InitialUtility:
    """Closed-form deterministic utility u with analytic conjugate."""

    kind: str
    params: dict
    u: Callable
    u_x: Callable
    u_xx: Callable
    conj: Callable  # utilde(y) = sup_x (u(x) - x y)
    conj_y: Callable  # utilde'(y); -conj_y is the inverse of u_x

    def risk_tolerance(self, x):
        return -self.u_x(x) / self.u_xx(x)


def make_initial_utility(kind, params=None, allow_negative_power=False) -> InitialUtility:
    """Power / log / exponential / power-mixture initial utilities.

    Power exponent a must lie in (0, 1) unless ``allow_negative_power`` (the
    field positivity requirement excludes a < 0 by default).
    """
    params = dict(params or {})
    if kind == "power":
        a = float(params["a"])
        if not (0 < a < 1) and not (allow_negative_power and a < 0):
            raise InvalidConfigError(f"power exponent a={a} outside (0,1)")
        q = a / (a - 1.0)  # conjugate exponent

        return InitialUtility(
            kind, {"a": a},
            u=lambda x: np.asarray(x) ** a / a,
            u_x=lambda x: np.asarray(x) ** (a - 1.0),
            u_xx=lambda x: (a - 1.0) * np.asarray(x) ** (a - 2.0),
            conj=lambda y: ((1.0 - a) / a) * np.asarray(y) ** q,
            conj_y=lambda y: -np.asarray(y) ** (1.0 / (a - 1.0)),
        )
    if kind == "log":
        return InitialUtility(
            kind, {},
            u=lambda x: np.log(x),
            u_x=lambda x: 1.0 / np.asarray(x),
            u_xx=lambda x: -1.0 / np.asarray(x) ** 2,
            conj=lambda y: -np.log(y) - 1.0,
            conj_y=lambda y: -1.0 / np.asarray(y),
        )
    if kind == "exponential":
        c = float(params["c"])
        if not c > 0:
            raise InvalidConfigError("exponential rate c must be positive")

        def conj(y):
            y = np.asarray(y, dtype=np.float64)
            return np.where(y < 1.0, (1.0 - y + y * np.log(np.minimum(y, 1.0))) / c, 0.0)

        return InitialUtility(
            kind, {"c": c},
            u=lambda x: (1.0 - np.exp(-c * np.asarray(x))) / c,
            u_x=lambda x: np.exp(-c * np.asarray(x)),
            u_xx=lambda x: -c * np.exp(-c * np.asarray(x)),
            conj=conj,
            conj_y=lambda y: np.minimum(np.log(y) / c, 0.0),
        )
    if kind == "mixture":
        w = np.asarray(params["weights"], dtype=np.float64)
        a = np.asarray(params["exponents"], dtype=np.float64)
        if (w <= 0).any() or not ((0 < a) & (a < 1)).all():
            raise InvalidConfigError("mixture needs positive weights, exponents in (0,1)")

        def u(x):
            x = np.asarray(x, dtype=np.float64)[..., None]
            return np.sum(w * x ** a / a, axis=-1)

        def u_x(x):
            x = np.asarray(x, dtype=np.float64)[..., None]
            return np.sum(w * x ** (a - 1.0), axis=-1)

        def u_xx(x):
            x = np.asarray(x, dtype=np.float64)[..., None]
            return np.sum(w * (a - 1.0) * x ** (a - 2.0), axis=-1)

        def _xstar(y):
            # u_x is strictly decreasing: bisect in log x
            y = np.asarray(y, dtype=np.float64)
            lo = np.full(y.shape, -60.0)
            hi = np.full(y.shape, 60.0)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                too_big = u_x(np.exp(mid)) < y
                hi = np.where(too_big, mid, hi)
                lo = np.where(too_big, lo, mid)
            return np.exp(0.5 * (lo + hi))

        return InitialUtility(
            kind, {"weights": w, "exponents": a},
            u=u, u_x=u_x, u_xx=u_xx,
            conj=lambda y: u(_xstar(y)) - _xstar(y) * np.asarray(y),
            conj_y=lambda y: -_xstar(y),
        )
    raise InvalidConfigError(f"unknown initial utility kind {kind!r}")


# ---------------------------------------------------------------------------
# grids and integration helpers


def default_x_grid(n=64, x_min=0.05, x_max=20.0) -> np.ndarray:
    """Geometric (log-uniform) wealth grid; curvature concentrates near 0."""
    return np.geomspace(x_min, x_max, n)


def integrate_from_zero(z, g):
    """Cumulative integral_0^{z_k} g dz for curves sampled on a positive grid.

    Trapezoid in log-z coordinates between grid points; below the smallest
    grid point a power law c z^p is fitted through the three smallest samples
    and integrated in closed form (falls back to a single trapezoid to zero
    when the samples change sign or the fit diverges).
    """
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    w = np.log(z)
    h = g * z  # integrand after z = e^w substitution
    seg = 0.5 * (h[..., :-1] + h[..., 1:]) * np.diff(w)
    cum = np.concatenate([np.zeros(g.shape[:-1] + (1,)), np.cumsum(seg, axis=-1)], axis=-1)
    # tail: fit log|g| ~ log c + p log z on the three smallest grid points
    g3 = g[..., :3]
    sign = np.sign(g[..., :1])
    consistent = (np.sign(g3) == sign).all(axis=-1) & (np.abs(g3) > 0).all(axis=-1)
    lw = w[:3] - w[:3].mean()
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.log(np.abs(np.where(consistent[..., None], g3, 1.0)))
        p = np.sum(lg * lw, axis=-1) / np.sum(lw * lw)
    p = np.clip(p, -0.999, 50.0)
    tail_power = g[..., 0] * z[0] / (p + 1.0)
    tail_trap = 0.5 * g[..., 0] * z[0]
    tail = np.where(consistent, tail_power, tail_trap)
    return cum + tail[..., None]


# ---------------------------------------------------------------------------
# field containers


@dataclass
class UtilityField:
    """Sampled utility random field with derivative planes.

    ``gamma_source`` (optional) knows the construction well enough to
    assemble the volatility gamma and its x-derivative for one time slice.
    """

    x_grid: np.ndarray
    values: np.ndarray  # (n_paths, n_times, n_grid)
    ux: np.ndarray
    uxx: np.ndarray
    dt: float
    lattice_ref: tuple
    provenance: str  # flow-built | closed-form | analytic | external
    gamma_source: Optional[object] = None
    extrapolated: Optional[np.ndarray] = None

    @property
    def grid(self):
        return self.x_grid

    @property
    def n_paths(self):
        return self.values.shape[0]

    @property
    def n_times(self):
        return self.values.shape[1]

    @property
    def times(self):
        return np.arange(self.n_times) * self.dt

    @property
    def has_gamma(self):
        return self.gamma_source is not None

    def gamma_slices(self, k):
        """(gamma, gamma_x) arrays of shape (n_paths, n_grid, n) at time index k."""
        if self.gamma_source is None:
            raise InvalidFieldError("field carries no volatility information")
        return self.gamma_source.slices(self, k)

    def evaluate(self, x, time_index=None, extrapolation="loglog"):
        """Interpolate U at wealth samples; returns (values, extrapolation flags).

        ``x`` has shape (n_paths, n_times, ...) — or (n_paths, ...) when a
        single ``time_index`` is given.
        """
        return _eval_planes(self.x_grid, self.values, x, time_index, extrapolation)

    def evaluate_ux(self, x, time_index=None, extrapolation="loglog"):
        # the marginal is positive and near power-law: interpolate in logs
        return _eval_planes(self.x_grid, self.ux, x, time_index, extrapolation,
                            log_space=True)


@dataclass
class DualField:
    """Convex conjugate field Utilde(t, y) with derivative planes."""

    y_grid: np.ndarray
    values: np.ndarray
    uy: np.ndarray
    uyy: np.ndarray
    dt: float
    lattice_ref: tuple
    provenance: str
    primal: Optional[UtilityField] = None
    gamma_source: Optional[object] = None  # for analytic duals
    saturated: Optional[np.ndarray] = None  # cells where y left the sampled U_x range

    @property
    def grid(self):
        return self.y_grid

    @property
    def n_paths(self):
        return self.values.shape[0]

    @property
    def n_times(self):
        return self.values.shape[1]

    @property
    def times(self):
        return np.arange(self.values.shape[1]) * self.dt

    @property
    def has_gamma(self):
        return self.gamma_source is not None or (self.primal is not None and self.primal.has_gamma)

    def gamma_slices(self, k):
        """(gamma_tilde, gamma_tilde_y) at time index k, shape (n_paths, n_y, n).

        gamma_tilde(t,y) is the primal volatility at the dual point
        x* = -Utilde_y; its y-derivative is -Utilde_yy gamma_x(t, x*).
        """
        if self.gamma_source is not None:
            return self.gamma_source.slices(self, k)
        if self.primal is None or not self.primal.has_gamma:
            raise InvalidFieldError("dual field carries no volatility information")
        gamma, gamma_x = self.primal.gamma_slices(k)
        xstar = -self.uy[:, k, :]
        gt = _interp_components(self.primal.x_grid, gamma, xstar)
        gxt = _interp_components(self.primal.x_grid, gamma_x, xstar)
        return gt, -self.uyy[:, k, :, None] * gxt

    def evaluate(self, y, time_index=None, extrapolation="loglog"):
        return _eval_planes(self.y_grid, self.values, y, time_index, extrapolation)

    def evaluate_uy(self, y, time_index=None, extrapolation="loglog"):
        # -Utilde_y is positive and near power-law in y: interpolate in logs
        vals, flags = _eval_planes(self.y_grid, -self.uy, y, time_index,
                                   extrapolation, log_space=True)
        return -vals, flags


def _eval_planes(grid, planes, q, time_index, extrapolation, log_space=False):
    """Chunked monotone interpolation of per-(path,time) curves at queries."""
    q = np.asarray(q, dtype=np.float64)
    if time_index is not None:
        planes = planes[:, time_index, :]
    squeeze = q.ndim == planes.ndim - 1
    if squeeze:
        q = q[..., None]
    out = np.empty(np.broadcast_shapes(q.shape, planes.shape[:-1] + q.shape[-1:]))
    flags = np.empty(out.shape, dtype=bool)
    qb = np.broadcast_to(q, out.shape)
    n_paths = planes.shape[0]
    for lo in range(0, n_paths, _PATH_CHUNK):
        hi = min(lo + _PATH_CHUNK, n_paths)
        vals, ex = monotone_eval(grid, planes[lo:hi], qb[lo:hi],
                                 extrapolation=extrapolation, log_space=log_space)
        out[lo:hi] = vals
        flags[lo:hi] = ex
    if squeeze:
        out, flags = out[..., 0], flags[..., 0]
    return out, flags


def _interp_components(x_grid, comps, xq):
    """Interpolate each vector component of (n_paths, n_grid, n) curves at xq."""
    n = comps.shape[-1]
    out = np.empty(xq.shape + (n,))
    for j in range(n):
        vals, _ = monotone_eval(x_grid, comps[..., j], xq)
        out[..., j] = vals
    return out


# ---------------------------------------------------------------------------
# flow construction


class _FlowGammaSource:
    """gamma_x = nu*(U_x) - U_x eta_sigma - x U_xx kappa*(x); gamma by integration."""

    def __init__(self, market: MarketSpec, kappa: PolicyField, nu: DualPolicyField):
        self.market = market
        self.kappa = kappa
        self.nu = nu

    def slices(self, field: UtilityField, k):
        m = self.market
        t = min(k, m.n_steps - 1) * m.dt
        idx = m.step_index(t)
        eta = m.eta_sigma[idx]
        ux = field.ux[:, k, :]
        uxx = field.uxx[:, k, :]
        x = field.x_grid
        xb = np.broadcast_to(x, ux.shape)
        kap = np.broadcast_to(np.asarray(self.kappa.kappa(t, xb), dtype=np.float64),
                              ux.shape + (m.n,))
        nu = np.broadcast_to(np.asarray(self.nu.nu(t, ux), dtype=np.float64),
                             ux.shape + (m.n,))
        gamma_x = nu - ux[..., None] * eta - (xb * uxx)[..., None] * kap
        gamma = np.moveaxis(integrate_from_zero(x, np.moveaxis(gamma_x, -1, -2)), -2, -1)
        return gamma, gamma_x


def build_utility_field(X_bundle: FlowBundle, Y_bundle: FlowBundle, u: InitialUtility,
                        market: MarketSpec = None, kappa: PolicyField = None,
                        nu: DualPolicyField = None, x_grid=None) -> UtilityField:
    """U(t,x) = integral_0^x Y*(t, u_x(Xinv(t,z))) dz on coupled flows.

    U_x(t,z) is the integrand itself; U_xx its grid derivative.  When the
    generators (market, kappa, nu) that produced the flows are attached the
    returned field can assemble its volatility planes.
    """
    require_coupled(X_bundle, Y_bundle)
    from .flows import _require_invertible  # deferred: flows imports lattice only

    _require_invertible(X_bundle)
    _require_invertible(Y_bundle)
    z = np.asarray(x_grid, dtype=np.float64) if x_grid is not None else X_bundle.grid.copy()
    n_paths, n_times = X_bundle.n_paths, X_bundle.n_times
    n_z = z.shape[0]
    g = np.empty((n_paths, n_times, n_z))
    flags = np.empty(g.shape, dtype=bool)
    for lo in range(0, n_paths, _PATH_CHUNK):
        hi = min(lo + _PATH_CHUNK, n_paths)
        # invert the wealth flow at the z levels
        xinv, f_inv = monotone_eval(X_bundle.values[lo:hi], X_bundle.grid, z[None, None, :])
        yq = u.u_x(xinv)
        del xinv
        # ride the density flow at the initial density u_x(Xinv)
        gv, f_y = monotone_eval(Y_bundle.grid, Y_bundle.values[lo:hi], yq)
        g[lo:hi] = gv
        flags[lo:hi] = f_inv | f_y
    # anchor the quadrature on the analytic t=0 curve: g(0,.) = u_x exactly,
    # so U(0,x) = u(x) to rounding and the shared quadrature bias cancels
    values = integrate_from_zero(z, g) - integrate_from_zero(z, u.u_x(z)) + u.u(z)
    uxx = np.gradient(g, z, axis=-1)
    source = None
    if market is not None and kappa is not None and nu is not None:
        source = _FlowGammaSource(market, kappa, nu)
    return UtilityField(x_grid=z, values=values, ux=g, uxx=uxx, dt=X_bundle.dt,
                        lattice_ref=X_bundle.lattice_ref, provenance="flow-built",
                        gamma_source=source, extrapolated=flags)


# ---------------------------------------------------------------------------
# conjugation


def conjugate_field(U: UtilityField, y_grid=None, n_y=None) -> DualField:
    """Numeric Legendre-Fenchel transform Utilde(t,y) = sup_x (U(t,x) - x y).

    The concave score U - x y peaks where U_x = y, so the argmax is found by
    shape-preserving inversion of the marginal curve; the score there is
    re-evaluated on the interpolated utility curve and never allowed below
    the score at the two neighbouring grid knots, so the Fenchel inequality
    holds exactly against the sampled lattice.
    """
    if (np.diff(U.ux, axis=-1) >= 0).any():
        raise InvalidFieldError("field is not strictly concave on its grid")
    if y_grid is None:
        # denser than the x grid: Utilde_y is strongly convex in y and the
        # inverse-pair identity is checked at interpolated points
        n_y = n_y or 2 * U.x_grid.shape[0]
        y_grid = np.geomspace(U.ux.min(), U.ux.max(), n_y)
    else:
        y_grid = np.asarray(y_grid, dtype=np.float64)
    n_paths, n_times, m = U.values.shape
    x = U.x_grid
    vals = np.empty((n_paths, n_times, y_grid.shape[0]))
    xstars = np.empty_like(vals)
    saturated = np.empty(vals.shape, dtype=bool)
    for lo in range(0, n_paths, _PATH_CHUNK):
        hi = min(lo + _PATH_CHUNK, n_paths)
        uc = U.values[lo:hi]
        # argmax: invert the decreasing marginal (reversed to ascending data);
        # the curve is near power-law, so interpolate in log-log coordinates
        xs, sat = monotone_eval(U.ux[lo:hi][..., ::-1], x[::-1], y_grid[None, None, :],
                                log_space=True)
        saturated[lo:hi] = sat
        # keep the smooth power-law continuation of x*(y) for the marginal
        # plane (a hard clip would put a slope kink at the saturation edge);
        # the score itself is evaluated on the sampled wealth range only
        xc = np.clip(xs, x[0], x[-1])
        slopes = pchip_slopes(x, uc)
        refined = hermite_eval(x, uc, slopes, xc) - xc * y_grid
        # never fall below the sampled scores at the knots bracketing x*
        idx = np.clip(batched_searchsorted(x, xc), 1, m - 1)
        ub = np.broadcast_to(uc, refined.shape[:-1] + (m,))
        s_lo = (np.take_along_axis(ub, idx - 1, axis=-1)
                - np.take_along_axis(np.broadcast_to(x, ub.shape), idx - 1, axis=-1) * y_grid)
        s_hi = (np.take_along_axis(ub, idx, axis=-1)
                - np.take_along_axis(np.broadcast_to(x, ub.shape), idx, axis=-1) * y_grid)
        grid_best = np.maximum(s_lo, s_hi)
        use_grid = grid_best > refined
        x_knot = np.where(
            s_lo > s_hi,
            np.take_along_axis(np.broadcast_to(x, ub.shape), idx - 1, axis=-1),
            np.take_along_axis(np.broadcast_to(x, ub.shape), idx, axis=-1))
        # the knot floor applies to the score plane only; the marginal plane
        # keeps the shape-preserving inversion, which stays smooth in y
        vals[lo:hi] = np.where(use_grid, grid_best, refined)
        xstars[lo:hi] = xs
    uy = -xstars
    uyy = np.gradient(uy, y_grid, axis=-1)
    return DualField(y_grid=y_grid, values=vals, uy=uy, uyy=uyy, dt=U.dt,
                     lattice_ref=U.lattice_ref, provenance=U.provenance, primal=U,
                     saturated=saturated)


# ---------------------------------------------------------------------------
# closed-form Z v(x/N) families


class _ZNGammaSource:
    """gamma = U sigma_Z - x U_x sigma_N (and its x-derivative)."""

    def __init__(self, vol_Z, vol_N):
        self.vol_Z = vol_Z
        self.vol_N = vol_N

    def slices(self, field: UtilityField, k):
        kk = min(k, self.vol_Z.shape[0] - 1)
        sZ, sN = self.vol_Z[kk], self.vol_N[kk]
        Uv = field.values[:, k, :]
        ux = field.ux[:, k, :]
        uxx = field.uxx[:, k, :]
        x = field.x_grid
        gamma = Uv[..., None] * sZ - (x * ux)[..., None] * sN
        gamma_x = ux[..., None] * sZ - (ux + x * uxx)[..., None] * sN
        return gamma, gamma_x


def closed_form_ZN(v: InitialUtility, Z_bundle: FlowBundle, N_bundle: FlowBundle,
                   market: MarketSpec, x_grid=None):
    """U(t,x) = Z_t v(x / N_t) with a consistency-condition report.

    Returns (UtilityField, report).  The report checks, pointwise in time,
    the sufficient condition matching the family kind of ``v`` (power or
    exponential); a violated condition is reported, not raised — deliberately
    broken fields are useful negative controls.
    """
    require_coupled(Z_bundle, N_bundle)
    if Z_bundle.mu_samples is None or N_bundle.mu_samples is None:
        raise InvalidConfigError("Z and N bundles must carry recorded coefficients")
    x = np.asarray(x_grid, dtype=np.float64) if x_grid is not None else default_x_grid()
    Z = Z_bundle.values[:, :, 0][..., None]
    N = N_bundle.values[:, :, 0][..., None]
    ratio = x / N
    values = Z * v.u(ratio)
    ux = Z / N * v.u_x(ratio)
    uxx = Z / N ** 2 * v.u_xx(ratio)
    field = UtilityField(x_grid=x, values=values, ux=ux, uxx=uxx, dt=Z_bundle.dt,
                         lattice_ref=Z_bundle.lattice_ref, provenance="closed-form",
                         gamma_source=_ZNGammaSource(Z_bundle.vol_samples,
                                                     N_bundle.vol_samples))
    report = _zn_condition_report(v, Z_bundle, N_bundle, market)
    return field, report


def _zn_condition_report(v, Z_bundle, N_bundle, market, tol=1e-10):
    muZ, sZ = Z_bundle.mu_samples, Z_bundle.vol_samples
    muN, sN = N_bundle.mu_samples, N_bundle.vol_samples
    n_steps = min(muZ.shape[0], market.n_steps)
    resid = np.empty(n_steps)
    sigmaN_in_range = True
    for k in range(n_steps):
        t = k * market.dt
        eta = market.eta_sigma[k]
        r = market.r[k]
        sNs, sNp = project_sigma(sN[k], t, market)
        sZs, sZp = project_sigma(sZ[k], t, market)
        if np.linalg.norm(sNp) > 1e-8 * (1 + np.linalg.norm(sN[k])):
            sigmaN_in_range = False
        if v.kind == "power":
            a = v.params["a"]
            resid[k] = (muZ[k] / a + r - muN[k] + sN[k] @ eta - sNp @ sZp
                        + np.sum((eta - sNs + sZs) ** 2) / (2 * (1 - a))
                        + 0.5 * (1 + a) * np.sum(sNp ** 2))
        elif v.kind == "exponential":
            resid[k] = max(abs(muN[k] - r - sN[k] @ eta),
                           abs(muZ[k] - 0.5 * np.sum((eta - sNs + sZs) ** 2)))
        else:
            resid[k] = np.nan
    worst = float(np.nanmax(np.abs(resid)))
    return {
        "family": v.kind,
        "max_abs_condition": worst,
        "passes": bool(worst < tol) if np.isfinite(worst) else False,
        "sigma_N_in_range": sigmaN_in_range,
        "per_step": resid,
    }


# ---------------------------------------------------------------------------
# decreasing (zero-volatility) utilities from power mixtures


@dataclass(frozen=True)
class MeasureMixture:
    """Finite discrete mixing measure over risk-aversion atoms, plus constant."""

    atoms: np.ndarray  # risk aversions alpha_i > 0, distinct
    weights: np.ndarray  # w_i > 0
    # None normalizes the free additive constant so that U(0,x) -> 0 as x -> 0
    # (i.e. C = -sum_i w_i / p_i over the non-log atoms)
    constant: Optional[float] = None
    log_limit: bool = False  # must be set to admit an atom at alpha = 1

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if (atoms <= 0).any() or (weights <= 0).any():
            raise InvalidConfigError("atoms and weights must be positive")
        if len(np.unique(atoms)) != atoms.shape[0]:
            raise InvalidConfigError("atoms must be distinct")
        if np.any(np.abs(atoms - 1.0) < 1e-14) and not self.log_limit:
            raise InvalidConfigError("atom at alpha=1 requires log_limit=True")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)


class _ZeroGammaSource:
    def slices(self, field, k):
        shape = field.values[:, k, :].shape + (self._dim,)
        z = np.zeros(shape)
        return z, z.copy()

    def __init__(self, dim):
        self._dim = dim


def accumulate_squared_premium(eta_path, dt, n_steps) -> np.ndarray:
    """A(t_k) = integral_0^{t_k} ||eta_s||^2 ds for piecewise-constant eta."""
    eta = np.asarray(eta_path, dtype=np.float64)
    if eta.ndim == 1:
        eta = np.tile(eta[None, :], (n_steps, 1))
    sq = np.sum(eta * eta, axis=-1)
    return np.concatenate([[0.0], np.cumsum(sq * dt)])


def decreasing_utility(m: MeasureMixture, eta_path, y_grid, t_grid, r_path=None):
    """Analytic dual/primal fields for a power-utility mixture, zero volatility.

    The dual is the finite sum over atoms alpha with p = 1 - 1/alpha:

        Utilde(t,y) = sum_i w_i (1/p_i)(1 - y^{p_i} exp(p_i R(t) - theta_i A(t))) + C,
        theta_i = p_i (p_i - 1) / 2,   A(t) = int ||eta||^2,  R(t) = int r.

    An atom at alpha = 1 contributes its removable-singularity limit
    -w (log y + R(t) + A(t)/2).  The primal field is recovered by inverting
    -Utilde_y by monotone bisection.  Both fields are deterministic
    (single-path planes, zero volatility).
    """
    y = np.asarray(y_grid, dtype=np.float64)
    t = np.asarray(t_grid, dtype=np.float64)
    if (np.diff(y) <= 0).any() or (y <= 0).any():
        raise InvalidConfigError("y_grid must be positive strictly increasing")
    dt = float(t[1] - t[0]) if t.shape[0] > 1 else 1.0
    n_steps = max(t.shape[0] - 1, 1)
    A = accumulate_squared_premium(eta_path, dt, n_steps)[: t.shape[0]]
    if r_path is None:
        R = np.zeros_like(A)
    else:
        r = np.broadcast_to(np.asarray(r_path, dtype=np.float64), (n_steps,))
        R = np.concatenate([[0.0], np.cumsum(r * dt)])[: t.shape[0]]
    alphas, ws = m.atoms, m.weights
    if m.constant is None:
        # normalize so the recovered primal vanishes at x -> 0+
        C = -sum(w / (1.0 - 1.0 / a) for a, w in zip(alphas, ws)
                 if abs(a - 1.0) >= 1e-14)
    else:
        C = float(m.constant)

    def dual_terms(tt_idx, yy):
        # returns (Utilde, Utilde_y, Utilde_yy, dUtilde/dt) at given times x grid
        Av = A[tt_idx][:, None]
        Rv = R[tt_idx][:, None]
        rv = np.gradient(R, t)[tt_idx][:, None] if t.shape[0] > 1 else 0.0 * Av
        av = np.gradient(A, t)[tt_idx][:, None] if t.shape[0] > 1 else 0.0 * Av
        val = np.zeros(Av.shape[:1] + yy.shape[-1:])
        vy = np.zeros_like(val)
        vyy = np.zeros_like(val)
        vt = np.zeros_like(val)
        for alpha, wgt in zip(alphas, ws):
            if abs(alpha - 1.0) < 1e-14:
                val += -wgt * (np.log(yy) + Rv + 0.5 * Av)
                vy += -wgt / yy + 0.0 * Rv
                vyy += wgt / yy ** 2 + 0.0 * Rv
                vt += -wgt * (rv + 0.5 * av)
                continue
            p = 1.0 - 1.0 / alpha
            theta = 0.5 * p * (p - 1.0)
            E = np.exp(p * Rv - theta * Av)
            term = yy ** p * E
            val += wgt / p * (1.0 - term)
            vy += -wgt * yy ** (p - 1.0) * E
            vyy += -wgt * (p - 1.0) * yy ** (p - 2.0) * E
            vt += -wgt / p * term * (p * rv - theta * av)
        return val + C, vy, vyy, vt

    idx = np.arange(t.shape[0])
    vals, uy, uyy, ut = dual_terms(idx, y[None, :])
    dual = DualField(y_grid=y.copy(), values=vals[None], uy=uy[None], uyy=uyy[None],
                     dt=dt, lattice_ref=("analytic",), provenance="analytic",
                     gamma_source=_ZeroGammaSource(1))
    dual.analytic_time_derivative = ut[None]  # exact d Utilde / dt, no finite differences

    # primal recovery: solve -Utilde_y(t, y) = x by bisection in log y
    x = np.geomspace((-uy).min() * 1.0000001, (-uy).max() * 0.9999999, y.shape[0])
    lo = np.full((t.shape[0], x.shape[0]), np.log(y[0]) - 40.0)
    hi = np.full_like(lo, np.log(y[-1]) + 40.0)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        _, vy_mid, _, _ = dual_terms(idx, np.exp(mid))
        # -Utilde_y decreases in y; too large means y too small
        too_big = -vy_mid > x
        lo = np.where(too_big, mid, lo)
        hi = np.where(too_big, hi, mid)
    ystar = np.exp(0.5 * (lo + hi))
    dv, _, vyy_s, _ = dual_terms(idx, ystar)
    prim_vals = dv + x * ystar
    prim_ux = ystar
    prim_uxx = -1.0 / vyy_s  # dy*/dx with x = -Utilde_y, so dx/dy = -Utilde_yy
    primal = UtilityField(x_grid=x, values=prim_vals[None], ux=prim_ux[None],
                          uxx=prim_uxx[None], dt=dt, lattice_ref=("analytic",),
                          provenance="analytic", gamma_source=_ZeroGammaSource(1))
    dual.primal = primal
    return dual, primal


# ---------------------------------------------------------------------------
# policies implied by a field


def optimal_policy_from_field(U: UtilityField, market: MarketSpec, time_indices=None):
    """x kappa*(t,x) = -(U_x eta_sigma + gamma_x^sigma) / U_xx and the
    quadratic-form minimum Q* with x^2 Q* = -||x kappa*||^2.

    Returns (kappa_star, q_star) with kappa_star of shape
    (n_paths, len(time_indices), n_grid, n).
    """
    if (U.uxx >= 0).any():
        raise InvalidFieldError("U_xx must be negative everywhere")
    if time_indices is None:
        time_indices = range(U.n_times)
    time_indices = list(time_indices)
    n = market.n
    kap = np.empty((U.n_paths, len(time_indices), U.x_grid.shape[0], n))
    for out_k, k in enumerate(time_indices):
        t = min(k, market.n_steps - 1) * market.dt
        eta = market.eta_sigma[market.step_index(t)]
        _, gamma_x = U.gamma_slices(k)
        g_sig, _ = project_sigma(gamma_x, t, market)
        ux = U.ux[:, k, :]
        uxx = U.uxx[:, k, :]
        xkap = -(ux[..., None] * eta + g_sig) / uxx[..., None]
        kap[:, out_k] = xkap / U.x_grid[:, None]
    q_star = -np.sum((kap * U.x_grid[:, None]) ** 2, axis=-1) / U.x_grid ** 2
    return kap, q_star


def dual_optimal_nu(D: DualField, market: MarketSpec, time_indices=None):
    """nu*(t,y) = -gamma_tilde_y^perp / (y Utilde_yy), orthogonal to range(sigma).

    Saturated cells (y outside the sampled primal marginal range, where the
    tabulated dual flattens) are returned as zero; strict convexity is
    required everywhere else.
    """
    if D.saturated is None:
        good = np.ones(D.values.shape, dtype=bool)
    else:
        g0 = ~D.saturated
        # erode by one cell: uyy is a central difference and touches neighbours
        good = g0.copy()
        good[..., 1:] &= g0[..., :-1]
        good[..., :-1] &= g0[..., 1:]
    if (D.uyy[good] <= 0).any():
        raise InvalidFieldError("Utilde_yy must be positive on unsaturated cells")
    if time_indices is None:
        time_indices = range(D.values.shape[1])
    time_indices = list(time_indices)
    out = np.zeros((D.values.shape[0], len(time_indices), D.y_grid.shape[0], market.n))
    for out_k, k in enumerate(time_indices):
        t = min(k, market.n_steps - 1) * market.dt
        _, gty = D.gamma_slices(k)
        _, g_perp = project_sigma(gty, t, market)
        ok = good[:, k, :]
        denom = np.where(ok, D.y_grid * D.uyy[:, k, :], 1.0)
        out[:, out_k] = np.where(ok[..., None], -g_perp / denom[..., None], 0.0)
    return out
