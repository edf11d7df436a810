"""Monte Carlo and finite-difference verification of the dynamic identities.

Drift estimators use the known volatility as a control variate: the per-cell
sample mean of (dU - gamma.dW)/dt is unbiased for the drift at O(dt) with a
variance that does not blow up as dt shrinks.  Martingale tests use normal
increment confidence intervals with Bonferroni correction across time pairs.
Statistical verdicts certify bounded-horizon behavior only; they can support
but never establish true martingality or integrability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import InvalidConfigError, InvalidInputError
from .lattice import BrownianLattice, FlowBundle, require_coupled
from .market import MarketSpec, project_sigma
from .reports import MartingaleVerdict, ResidualReport
from .utility import DualField, UtilityField
from .flows import flow_initial_derivative

_TINY = 1e-300


def _checkpoints(n_times, k=10):
    return np.unique(np.linspace(0, n_times - 1, min(k + 1, n_times)).astype(int))


def martingale_test(samples, mode="martingale", confidence=0.95, dt=1.0,
                    n_checkpoints=10) -> MartingaleVerdict:
    """Test the sign of increment means of (path, time) samples.

    martingale: every checkpoint-pair increment CI must contain 0;
    supermartingale: no increment mean significantly positive;
    submartingale: no increment mean significantly negative.
    Bonferroni across checkpoint pairs keeps the family-wise level.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if not np.isfinite(samples).all():
        raise InvalidInputError("non-finite samples in martingale test")
    n_paths, n_times = samples.shape
    if n_paths < 100:
        raise InvalidConfigError("martingale test needs at least 100 paths")
    cps = _checkpoints(n_times, n_checkpoints)
    pairs = list(zip(cps[:-1], cps[1:]))
    z = stats.norm.ppf(1.0 - (1.0 - confidence) / (2.0 * len(pairs)))
    stat = -np.inf
    ok = True
    for i, j in pairs:
        d = samples[:, j] - samples[:, i]
        mean = d.mean()
        se = d.std(ddof=1) / np.sqrt(n_paths)
        s = mean / max(se, _TINY) if (mean != 0 or se > 0) else 0.0
        if mode == "martingale":
            stat = max(stat, abs(s))
            ok &= abs(s) <= z
        elif mode == "supermartingale":
            stat = max(stat, s)
            ok &= s <= z
        elif mode == "submartingale":
            stat = max(stat, -s)
            ok &= -s <= z
        else:
            raise InvalidConfigError(f"unknown mode {mode!r}")
    total = samples[:, cps[-1]] - samples[:, cps[0]]
    se_total = total.std(ddof=1) / np.sqrt(n_paths)
    final_sigmas = total.mean() / max(se_total, _TINY)
    means = np.array([(samples[:, c] - samples[:, 0]).mean() for c in cps])
    stderrs = np.array([(samples[:, c] - samples[:, 0]).std(ddof=1) / np.sqrt(n_paths)
                        for c in cps])
    return MartingaleVerdict(mode=mode, times=cps * dt, means=means, stderrs=stderrs,
                             statistic=float(stat), confidence=confidence,
                             verdict="pass" if ok else "fail",
                             final_drift_sigmas=float(final_sigmas))


def _interior_mask(field, margin=2):
    """Grid cells trusted for derivative formulas: away from ends, never extrapolated."""
    n_grid = field.grid.shape[0]
    mask = np.zeros(n_grid, dtype=bool)
    mask[margin:n_grid - margin] = True
    return mask


def hjb_drift_residual(U: UtilityField, market: MarketSpec, lattice: BrownianLattice,
                       c_dt=2.0, name="hjb-drift", margin=2) -> ResidualReport:
    """Estimated drift of U(t,x) vs -x U_x r + ||gamma_x^sigma + U_x eta||^2/(2 U_xx).

    Per (step, cell): beta_hat = mean over paths of (dU - gamma.dW)/dt.
    Threshold: 3 stderr + c_dt * dt * (|formula| + |beta_hat|) per cell,
    aggregated as means over trusted cells.
    """
    require_coupled(U, lattice)
    if U.n_paths < 1000:
        return ResidualReport(name=name, mean_abs_residual=float("nan"),
                              relative_residual=float("nan"), threshold=float("nan"),
                              dt=U.dt, n_paths=U.n_paths, extra={"verdict": "inconclusive"})
    keep = _interior_mask(U, margin)
    dt = U.dt
    resid_sum = thr_sum = count = 0
    worst = (0.0, ())
    scale_sum = 0.0
    for k in range(U.n_times - 1):
        t = k * dt
        gamma, gamma_x = U.gamma_slices(k)
        dw = lattice.increments[:, k, :][:, None, :]
        est = (U.values[:, k + 1, :] - U.values[:, k, :]
               - np.sum(gamma * dw, axis=-1)) / dt
        g_sig, _ = project_sigma(gamma_x, t, market)
        eta = market.eta_sigma[market.step_index(t)]
        ux, uxx = U.ux[:, k, :], U.uxx[:, k, :]
        num = g_sig + ux[..., None] * eta
        formula = (-U.x_grid * ux * market.r[market.step_index(t)]
                   + np.sum(num * num, axis=-1) / (2.0 * uxx))
        beta_hat = est.mean(axis=0)
        stderr = est.std(axis=0, ddof=1) / np.sqrt(U.n_paths)
        f_bar = formula.mean(axis=0)
        ok = keep.copy()
        if U.extrapolated is not None:
            ok &= ~U.extrapolated[:, k, :].any(axis=0)
        r_cell = np.abs(beta_hat - f_bar)[ok]
        t_cell = (3.0 * stderr + c_dt * dt * (np.abs(f_bar) + np.abs(beta_hat)))[ok]
        resid_sum += r_cell.sum()
        thr_sum += t_cell.sum()
        count += ok.sum()
        scale_sum += np.abs(f_bar[ok]).sum() + np.abs(U.values[:, k, ok].mean(axis=0)).sum()
        i_worst = int(np.argmax(r_cell)) if r_cell.size else 0
        if r_cell.size and r_cell[i_worst] > worst[0]:
            worst = (float(r_cell[i_worst]), (t, float(U.x_grid[ok][i_worst])))
    mean_abs = resid_sum / max(count, 1)
    thr = thr_sum / max(count, 1)
    return ResidualReport(name=name, mean_abs_residual=float(mean_abs),
                          relative_residual=float(mean_abs / max(scale_sum / max(count, 1), _TINY)),
                          threshold=float(thr), dt=dt, n_paths=U.n_paths,
                          worst_cell=worst[1], extra={"worst_residual": worst[0]})


def dual_drift_residual(D: DualField, market: MarketSpec,
                        lattice: Optional[BrownianLattice] = None, c_dt=2.0,
                        name="dual-drift", margin=2,
                        analytic_threshold=1e-8) -> ResidualReport:
    """Estimated drift of Utilde(t,y) vs
    y Utilde_y r + (||gamma~_y||^2 - ||gamma~_y^sigma + y Utilde_yy eta||^2)/(2 Utilde_yy).

    Analytic (zero-volatility) duals are checked deterministically against
    their exact time derivative; sampled duals use the same control-variate
    estimator as the primal drift check.
    """
    keep = _interior_mask(D, margin)
    y = D.y_grid
    if getattr(D, "analytic_time_derivative", None) is not None:
        worst = 0.0
        worst_cell = ()
        total = 0.0
        count = 0
        for k in range(D.n_times):
            t = min(k, market.n_steps - 1) * market.dt
            eta = market.eta_sigma[market.step_index(t)]
            r = market.r[market.step_index(t)]
            gt, gty = D.gamma_slices(k)
            uy, uyy = D.uy[:, k, :], D.uyy[:, k, :]
            g_sig, _ = project_sigma(gty, t, market)
            num = g_sig + (y * uyy)[..., None] * eta
            formula = (y * uy * r
                       + (np.sum(gty * gty, axis=-1) - np.sum(num * num, axis=-1))
                       / (2.0 * uyy))
            resid = np.abs(D.analytic_time_derivative[:, k, :] - formula)[:, keep]
            total += resid.sum()
            count += resid.size
            if resid.max() > worst:
                worst = float(resid.max())
                worst_cell = (t, float(y[keep][int(np.argmax(resid.max(axis=0)))]))
        mean_abs = total / max(count, 1)
        return ResidualReport(name=name, mean_abs_residual=float(mean_abs),
                              relative_residual=float(mean_abs),
                              threshold=analytic_threshold, dt=D.dt, n_paths=1,
                              worst_cell=worst_cell,
                              extra={"worst_residual": worst, "mode": "analytic"})
    if lattice is None:
        raise InvalidConfigError("sampled dual residual needs the Brownian lattice")
    require_coupled(D, lattice)
    dt = D.dt
    resid_sum = thr_sum = count = 0
    scale_sum = 0.0
    worst = (0.0, ())
    for k in range(D.n_times - 1):
        t = k * dt
        gt, gty = D.gamma_slices(k)
        dw = lattice.increments[:, k, :][:, None, :]
        est = (D.values[:, k + 1, :] - D.values[:, k, :]
               - np.sum(gt * dw, axis=-1)) / dt
        eta = market.eta_sigma[market.step_index(t)]
        r = market.r[market.step_index(t)]
        uy, uyy = D.uy[:, k, :], D.uyy[:, k, :]
        g_sig, _ = project_sigma(gty, t, market)
        num = g_sig + (y * uyy)[..., None] * eta
        formula = (y * uy * r
                   + (np.sum(gty * gty, axis=-1) - np.sum(num * num, axis=-1))
                   / (2.0 * uyy))
        beta_hat = est.mean(axis=0)
        stderr = est.std(axis=0, ddof=1) / np.sqrt(D.n_paths)
        f_bar = formula.mean(axis=0)
        r_cell = np.abs(beta_hat - f_bar)[keep]
        t_cell = (3.0 * stderr + c_dt * dt * (np.abs(f_bar) + np.abs(beta_hat)))[keep]
        resid_sum += r_cell.sum()
        thr_sum += t_cell.sum()
        count += keep.sum()
        scale_sum += np.abs(f_bar[keep]).sum()
        i_w = int(np.argmax(r_cell))
        if r_cell[i_w] > worst[0]:
            worst = (float(r_cell[i_w]), (t, float(y[keep][i_w])))
    mean_abs = resid_sum / max(count, 1)
    return ResidualReport(name=name, mean_abs_residual=float(mean_abs),
                          relative_residual=float(mean_abs / max(scale_sum / max(count, 1), _TINY)),
                          threshold=float(thr_sum / max(count, 1)), dt=dt,
                          n_paths=D.n_paths, worst_cell=worst[1],
                          extra={"worst_residual": worst[0]})


def marginal_dynamics_check(U: UtilityField, X_bundle: FlowBundle, market: MarketSpec,
                            lattice: BrownianLattice, nu_fn=None, margin=2,
                            name="marginal-dynamics") -> ResidualReport:
    """Dynamics of M = U_x(t, X*(x)): drift -r M, volatility M (nu*(M) - eta).

    Drift is checked as the standardized gap between the per-cell mean of
    dM/dt and -r M (in estimator standard errors).  Volatility is recovered by
    regressing relative increments dM/M on the Brownian increments, pooled
    over paths and steps per cell, and compared in relative terms.
    """
    require_coupled(U, X_bundle, lattice)
    M, _ = U.evaluate_ux(X_bundle.values)
    keep = _interior_mask(X_bundle, margin)
    dt = U.dt
    n_paths, n_times, n_grid = M.shape
    dM = np.diff(M, axis=1)
    rel = dM / M[:, :-1, :]
    # drift: mean of dM/dt vs mean of -r M per cell, pooled over steps
    r_steps = market.r[market.step_index(np.arange(n_times - 1) * dt)]
    target = (-r_steps[None, :, None] * M[:, :-1, :]).mean(axis=(0, 1))
    est = dM.mean(axis=(0, 1)) / dt
    se = dM.std(ddof=1, axis=(0, 1)) / np.sqrt(n_paths * (n_times - 1)) / dt
    drift_sigmas = np.abs(est - target) / np.maximum(se, _TINY)
    # volatility: pooled regression per cell and coordinate
    n = lattice.dim
    vol_hat = np.empty((n_grid, n))
    vol_ref = np.zeros((n_grid, n))
    dw = lattice.increments  # (P, steps, n)
    denom = np.sum(dw * dw, axis=(0, 1))
    for j in range(n):
        vol_hat[:, j] = np.einsum("pkg,pk->g", rel, dw[:, :, j]) / denom[j]
    for k in range(n_times - 1):
        t = k * dt
        eta = market.eta_sigma[market.step_index(t)]
        nu = np.zeros(n) if nu_fn is None else np.asarray(nu_fn(t, M[:, k, :]), dtype=np.float64)
        nu = np.broadcast_to(nu, M[:, k, :].shape + (n,))
        vol_ref += (nu - eta).mean(axis=0)
    vol_ref /= (n_times - 1)
    scale = np.maximum(np.linalg.norm(vol_ref, axis=-1, keepdims=True), _TINY)
    vol_rel_err = np.abs(vol_hat - vol_ref) / scale
    worst_drift = float(drift_sigmas[keep].max())
    worst_vol = float(vol_rel_err[keep].max())
    return ResidualReport(name=name,
                          mean_abs_residual=float(np.abs(est - target)[keep].mean()),
                          relative_residual=worst_vol, threshold=float("nan"),
                          dt=dt, n_paths=n_paths,
                          extra={"max_drift_sigmas": worst_drift,
                                 "max_vol_rel_err": worst_vol})


@dataclass
class FieldCharacteristics:
    """Local description of a random field F(t,x) for Ito-Ventzel checks.

    All callables take (t, x) with x an array; gamma/gamma_x return an extra
    trailing Brownian-coordinate axis.
    """

    value: Callable
    f_x: Callable
    f_xx: Callable
    beta: Callable
    gamma: Callable
    gamma_x: Callable


def estimate_characteristics(field: UtilityField, lattice: BrownianLattice) -> FieldCharacteristics:
    """Per-cell regression estimates of (beta, gamma) from sampled planes.

    Fallback route when no analytic characteristics are available; the
    regression noise floor does not shrink with dt, so convergence studies
    should prefer analytic characteristics.
    """
    require_coupled(field, lattice)
    dV = np.diff(field.values, axis=1)  # (P, steps, G)
    dw = lattice.increments
    beta_cells = dV.mean(axis=0) / field.dt  # (steps, G)
    denom = np.sum(dw * dw, axis=0)  # (steps, n)
    gamma_cells = np.einsum("pkg,pkn->kgn", dV, dw) / denom[:, None, :]
    gamma_x_cells = np.gradient(gamma_cells, field.x_grid, axis=1)
    mean_planes = field.values.mean(axis=0)
    ux_planes = field.ux.mean(axis=0)
    uxx_planes = field.uxx.mean(axis=0)

    def _k(t):
        return min(int(round(t / field.dt)), field.n_times - 1)

    def _interp(plane_fn, t, x):
        from .interp import monotone_eval as _me

        vals, _ = _me(field.x_grid, plane_fn, np.asarray(x, dtype=np.float64))
        return vals

    def _interp_vec(cells, t, x):
        k = min(_k(t), cells.shape[0] - 1)
        out = np.empty(np.shape(x) + (cells.shape[-1],))
        for j in range(cells.shape[-1]):
            out[..., j] = _interp(cells[k, :, j], t, x)
        return out

    return FieldCharacteristics(
        value=lambda t, x: _interp(mean_planes[_k(t)], t, x),
        f_x=lambda t, x: _interp(ux_planes[_k(t)], t, x),
        f_xx=lambda t, x: _interp(uxx_planes[_k(t)], t, x),
        beta=lambda t, x: _interp(beta_cells[min(_k(t), beta_cells.shape[0] - 1)], t, x),
        gamma=lambda t, x: _interp_vec(gamma_cells, t, x),
        gamma_x=lambda t, x: _interp_vec(gamma_x_cells, t, x),
    )


def ito_ventzel_residual(F, X_values, lattice: BrownianLattice, x_vol_fn,
                         F_values=None, name="ito-ventzel") -> ResidualReport:
    """Per-step residual of the compound increment of F(t, X_t).

    Predicted increment over one step:
        beta dt + gamma.dW + F_x dX + F_xx ||vol_X||^2 dt / 2
        + gamma_x . vol_X dt                       (the correction term).
    Also reports the residual with the correction term omitted — it must be
    strictly larger whenever gamma_x . vol_X is bounded away from zero.

    ``F`` is a :class:`FieldCharacteristics`; ``X_values`` an array
    (n_paths, n_steps+1) of coupled samples; ``x_vol_fn(t, x)`` the absolute
    volatility vector of X.  ``F_values`` optionally supplies exact sampled
    values of F(t_k, X_k) (n_paths, n_steps+1) to avoid interpolation noise.
    """
    X_values = np.asarray(X_values, dtype=np.float64)
    n_paths, n_times = X_values.shape
    if n_paths != lattice.n_paths or n_times != lattice.n_steps + 1:
        raise InvalidConfigError("X samples do not match the lattice shape")
    dt = lattice.dt
    horizon = lattice.n_steps * dt
    acc = np.zeros(n_paths)
    acc_nc = np.zeros(n_paths)
    abs_sum = abs_sum_nc = 0.0
    for k in range(lattice.n_steps):
        t = k * dt
        xk, xk1 = X_values[:, k], X_values[:, k + 1]
        if F_values is not None:
            lhs = F_values[:, k + 1] - F_values[:, k]
        else:
            lhs = F.value(t + dt, xk1) - F.value(t, xk)
        dw = lattice.increments[:, k, :]
        dx = xk1 - xk
        volx = np.broadcast_to(np.asarray(x_vol_fn(t, xk), dtype=np.float64),
                               xk.shape + (lattice.dim,))
        core = (F.beta(t, xk) * dt + np.sum(F.gamma(t, xk) * dw, axis=-1)
                + F.f_x(t, xk) * dx
                + 0.5 * F.f_xx(t, xk) * np.sum(volx * volx, axis=-1) * dt)
        corr = np.sum(F.gamma_x(t, xk) * volx, axis=-1) * dt
        resid = lhs - core - corr
        resid_nc = lhs - core
        acc += resid
        acc_nc += resid_nc
        abs_sum += np.abs(resid).mean()
        abs_sum_nc += np.abs(resid_nc).mean()
    per_dt = abs_sum / lattice.n_steps / dt
    per_dt_nc = abs_sum_nc / lattice.n_steps / dt
    return ResidualReport(name=name, mean_abs_residual=float(per_dt),
                          relative_residual=float(per_dt), threshold=float("nan"),
                          dt=dt, n_paths=n_paths,
                          extra={"accumulated_gap_per_year": float(np.abs(acc).mean() / horizon),
                                 "accumulated_gap_no_correction": float(np.abs(acc_nc).mean() / horizon),
                                 # path-averaged signed gaps: zero-mean noise
                                 # cancels across paths, so a missing drift
                                 # term (the correction) shows up as bias
                                 "mean_gap_per_year": float(abs(acc.mean()) / horizon),
                                 "mean_gap_no_correction": float(abs(acc_nc.mean()) / horizon),
                                 "per_dt_no_correction": float(per_dt_nc),
                                 # per-step L1 residuals: O(dt) in mean, so they
                                 # halve per dt halving (first-order evidence)
                                 "mean_step_residual": float(abs_sum / lattice.n_steps),
                                 "mean_step_residual_no_correction": float(abs_sum_nc / lattice.n_steps)})


def risk_tolerance_check(U: UtilityField, X_bundle: FlowBundle, Y0_samples, u,
                         confidence=0.95, margin=2, grid_index=None,
                         name="risk-tolerance"):
    """alpha_U(t, X*(x)) = alpha_u(x) X*_x(t,x), and Y0 alpha_U(t,X*) martingale.

    Returns (ResidualReport on the identity, MartingaleVerdict on the product
    at one interior grid point).
    """
    require_coupled(U, X_bundle)
    ux_at, fl1 = U.evaluate_ux(X_bundle.values)
    uxx_at, fl2 = _eval_uxx(U, X_bundle.values)
    alpha_U = -ux_at / uxx_at
    rhs = u.risk_tolerance(X_bundle.grid) * flow_initial_derivative(X_bundle)
    keep = _interior_mask(X_bundle, margin)
    # the identity is pointwise, so mask per sample: drop flagged queries and
    # samples that diffused into the outer knots of the tabulated range, where
    # the one-sided second difference degrades
    lo, hi = U.x_grid[margin], U.x_grid[-1 - margin]
    ok = (keep[None, None, :] & ~fl1 & ~fl2
          & (X_bundle.values > lo) & (X_bundle.values < hi))
    rel = np.abs(alpha_U - rhs)[ok] / np.abs(rhs)[ok]
    report = ResidualReport(name=name, mean_abs_residual=float(np.abs(alpha_U - rhs)[ok].mean()),
                            relative_residual=float(rel.max()), threshold=float("nan"),
                            dt=U.dt, n_paths=U.n_paths,
                            extra={"max_rel_err": float(rel.max()),
                                   "mean_rel_err": float(rel.mean())})
    gi = grid_index if grid_index is not None else X_bundle.grid.shape[0] // 2
    product = np.asarray(Y0_samples, dtype=np.float64) * alpha_U[:, :, gi]
    verdict = martingale_test(product, mode="martingale", confidence=confidence, dt=U.dt)
    return report, verdict


def _eval_uxx(U: UtilityField, x):
    return _eval_planes_uxx(U, x)


def _eval_planes_uxx(U, x):
    from .utility import _eval_planes

    return _eval_planes(U.x_grid, U.uxx, x, None, "loglog")
