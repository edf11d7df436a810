"""Config-driven experiment runner: simulate, build, verify, report.

``flowutility run <config.toml>`` executes the deterministic pipeline
(simulate flows -> audit -> invert -> build the field -> conjugate ->
verify) and writes bundles, fields, a verification report JSON and CSV plot
tables into the output directory.  Exit status 0 iff every enabled verdict
passes.  ``flowutility report <dir>`` consolidates report files into one
machine-readable CSV plus a text table.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import container, flows, lattice, utility, verify
from .errors import FlowUtilityError, InvalidConfigError
from .market import MarketSpec

OUT_ENV = "FLOWUTILITY_OUT"
REPORT_NAME = "report.json"
_ENTRY_KEYS = ("name", "reference", "residual", "threshold", "verdict", "n_paths", "dt")


def load_config(path):
    raw = Path(path).read_bytes()
    cfg = tomllib.loads(raw.decode("utf-8"))
    if cfg.get("schema_version") != 1:
        raise InvalidConfigError(f"{path}: unsupported or missing schema_version")
    for key in ("name", "market", "lattice"):
        if key not in cfg:
            raise InvalidConfigError(f"{path}: missing required key {key!r}")
    cfg["_hash"] = hashlib.sha256(raw).hexdigest()[:16]
    return cfg


def _build_market(cfg):
    m = cfg["market"]
    lat = cfg["lattice"]
    return MarketSpec.constant(n=m["n"], d=m["d"], r=m["r"], b=m["b"], sigma=m["sigma"],
                               dt=lat["dt"], n_steps=lat["n_steps"])


def _build_initial_utility(cfg):
    blk = cfg.get("initial_utility", {"kind": "power", "a": 0.5})
    kind = blk["kind"]
    params = {k: v for k, v in blk.items() if k != "kind"}
    return utility.make_initial_utility(kind, params)


def _kappa_from_registry(cfg, market, u):
    blk = cfg.get("policies", {})
    name = blk.get("kappa", "zero")
    if name == "zero":
        return lattice.PolicyField(lambda t, x: np.zeros(market.n), name="zero")
    if name == "merton":
        if u.kind != "power":
            raise InvalidConfigError("merton policy requires a power initial utility")
        a = u.params["a"]

        def merton(t, x, _m=market, _a=a):
            return _m.eta_sigma[_m.step_index(t)] / (1.0 - _a)

        return lattice.PolicyField(merton, name="merton")
    if name == "constant":
        vec = np.asarray(blk["kappa_value"], dtype=np.float64)
        return lattice.PolicyField(lambda t, x: vec, name="constant")
    raise InvalidConfigError(f"unknown kappa registry entry {name!r}")


def _nu_from_registry(cfg, market):
    blk = cfg.get("policies", {})
    name = blk.get("nu", "zero")
    if name == "zero":
        return lattice.DualPolicyField(lambda t, y: np.zeros(market.n), name="zero")
    if name == "constant":
        vec = np.asarray(blk["nu_value"], dtype=np.float64)
        return lattice.DualPolicyField(lambda t, y: vec, name="constant")
    raise InvalidConfigError(f"unknown nu registry entry {name!r}")


def _entry(name, reference, residual, threshold, verdict, n_paths, dt):
    return {"name": name, "reference": reference, "residual": float(residual),
            "threshold": float(threshold), "verdict": verdict,
            "n_paths": int(n_paths), "dt": float(dt)}


def _verdict(ok):
    return "pass" if ok else "fail"


def _run_flow_family(cfg, market, lat, outdir, entries):
    u = _build_initial_utility(cfg)
    grids = cfg.get("grids", {})
    x_grid = utility.default_x_grid(grids.get("n_x", 64), grids.get("x_min", 0.05),
                                    grids.get("x_max", 20.0))
    kappa = _kappa_from_registry(cfg, market, u)
    nu = _nu_from_registry(cfg, market)
    X = lattice.simulate_wealth_flow(lat, market, kappa, x_grid)
    y_lo, y_hi = u.u_x(x_grid[-1]), u.u_x(x_grid[0])
    y_grid = np.geomspace(y_lo * 0.02, y_hi * 50.0, x_grid.shape[0])
    Y = lattice.simulate_spd_flow(lat, market, nu, y_grid)
    U = utility.build_utility_field(X, Y, u, market=market, kappa=kappa, nu=nu)
    container.save_bundle(X, outdir / "wealth.bin", market=market)
    container.save_field(U, outdir / "utility.bin", role="utility", market=market)
    container.export_summary_csv(outdir / "utility_summary.csv", U.times, U.x_grid, U.values)

    ver = cfg.get("verification", {})
    confidence = ver.get("confidence", 0.95)
    checks = ver.get("checks", ["consistency", "hjb", "conjugacy"])
    mid = x_grid.shape[0] // 2
    if "consistency" in checks:
        samples, _ = U.evaluate(X.values[:, :, mid])
        v = verify.martingale_test(samples, "martingale", confidence, dt=lat.dt)
        entries.append(_entry("consistency-martingale", "optimal-wealth martingale",
                              v.statistic, _z(confidence, v), v.verdict,
                              lat.n_paths, lat.dt))
        zero = lattice.PolicyField(lambda t, x: np.zeros(market.n), name="zero")
        X0 = lattice.simulate_wealth_flow(lat, market, zero, x_grid[mid:mid + 1])
        s0, _ = U.evaluate(X0.values[:, :, 0])
        v0 = verify.martingale_test(s0, "supermartingale", confidence, dt=lat.dt)
        entries.append(_entry("consistency-supermartingale", "suboptimal-wealth supermartingale",
                              v0.statistic, _z(confidence, v0), v0.verdict, lat.n_paths, lat.dt))
    if "hjb" in checks:
        rep = verify.hjb_drift_residual(U, market, lat)
        entries.append(_entry("hjb-drift", "drift constraint", rep.mean_abs_residual,
                              rep.threshold, _verdict(rep.passed), rep.n_paths, rep.dt))
    if "conjugacy" in checks:
        D = utility.conjugate_field(U)
        keep = slice(4, -4)
        x_back, _ = _inverse_pair(U, D, keep)
        entries.append(_entry("conjugacy-inverse-pair", "dual marginal inverse",
                              x_back, 1e-3, _verdict(x_back < 1e-3), lat.n_paths, lat.dt))
    levels = int(cfg.get("verification", {}).get("dt_levels", 1))
    if levels > 1:
        factors = _dt_study(cfg, market, levels)
        entries.append(_entry("inverse-flow-convergence", "inverse flow dynamics",
                              min(factors), 1.4,
                              _verdict(all(1.4 <= f <= 3.0 for f in factors)),
                              lat.n_paths, lat.dt))


def _z(confidence, verdict):
    from scipy import stats

    pairs = max(len(verdict.times) - 1, 1)
    return float(stats.norm.ppf(1.0 - (1.0 - confidence) / (2.0 * pairs)))


def _inverse_pair(U, D, keep):
    ux = U.ux[:, :, keep]
    xb, _ = D.evaluate_uy(ux)
    target = np.broadcast_to(U.x_grid[keep], xb.shape)
    rel = np.abs(-xb - target) / target
    return float(rel.max()), float(rel.mean())


def _dt_study(cfg, market, levels):
    """Mean accumulated inverse-flow residual across dt halvings; ratios returned."""
    lat_cfg = cfg["lattice"]
    u = _build_initial_utility(cfg)
    kappa = _kappa_from_registry(cfg, market, u)
    gaps = []
    for lev in range(levels):
        mult = 2 ** lev
        n_steps = lat_cfg["n_steps"] * mult
        dt = lat_cfg["dt"] / mult
        m = MarketSpec.constant(n=market.n, d=market.d, r=market.r[0], b=market.b[0],
                                sigma=market.sigma[0], dt=dt, n_steps=n_steps)
        lat = lattice.generate_lattice(min(lat_cfg["n_paths"], 1000), n_steps, dt,
                                       market.n, lat_cfg["seed"])
        x_grid = utility.default_x_grid(24, 0.2, 5.0)
        X = lattice.simulate_wealth_flow(lat, m, kappa, x_grid)
        inv = flows.invert_flow(X, x_grid)

        def mu_fn(t, x, _m=m, _k=kappa):
            kap = np.broadcast_to(np.asarray(_k.kappa(t, x)), x.shape + (_m.n,))
            eta = _m.eta_sigma[_m.step_index(t)]
            return x * (_m.r[_m.step_index(t)] + kap @ eta)

        def vol_fn(t, x, _m=m, _k=kappa):
            kap = np.broadcast_to(np.asarray(_k.kappa(t, x)), x.shape + (_m.n,))
            return x[..., None] * kap

        rep = flows.inverse_flow_dynamics_residual(X, inv, lat, mu_fn, vol_fn)
        gaps.append(rep.extra["mean_step_residual"])
    return [gaps[i] / gaps[i + 1] for i in range(len(gaps) - 1)]


def _run_zn_family(cfg, market, lat, outdir, entries):
    u = _build_initial_utility(cfg)
    zn = cfg.get("zn", {})
    sigma_N = np.asarray(zn.get("sigma_N", [0.0] * market.n), dtype=np.float64)
    sigma_Z = np.asarray(zn.get("sigma_Z", [0.0] * market.n), dtype=np.float64)
    mu_offset = float(zn.get("mu_Z_offset", 0.0))

    def mu_N(t):
        eta = market.eta_sigma[market.step_index(t)]
        return market.r[market.step_index(t)] + sigma_N @ eta

    def mu_Z(t):
        from .market import project_sigma as proj

        eta = market.eta_sigma[market.step_index(t)]
        sNs, _ = proj(sigma_N, t, market)
        sZs, _ = proj(sigma_Z, t, market)
        return 0.5 * float(np.sum((eta - sNs + sZs) ** 2)) + mu_offset

    Z = lattice.simulate_scalar(lat, mu_Z, lambda t: sigma_Z, 1.0, name="Z")
    N = lattice.simulate_scalar(lat, mu_N, lambda t: sigma_N, 1.0, name="N")
    grids = cfg.get("grids", {})
    x_grid = utility.default_x_grid(grids.get("n_x", 64), grids.get("x_min", 0.05),
                                    grids.get("x_max", 20.0))
    U, cond = utility.closed_form_ZN(u, Z, N, market, x_grid=x_grid)
    container.save_field(U, outdir / "utility.bin", role="utility", market=market)
    container.export_summary_csv(outdir / "utility_summary.csv", U.times, U.x_grid, U.values)
    entries.append(_entry("zn-condition", "consistency sufficient condition",
                          cond["max_abs_condition"], 1e-8,
                          _verdict(cond["passes"]), lat.n_paths, lat.dt))
    rep = verify.hjb_drift_residual(U, market, lat)
    entries.append(_entry("hjb-drift", "drift constraint", rep.mean_abs_residual,
                          rep.threshold, _verdict(rep.passed), rep.n_paths, rep.dt))


def _run_decreasing_family(cfg, market, lat, outdir, entries):
    blk = cfg.get("decreasing", {})
    mix = utility.MeasureMixture(atoms=blk.get("atoms", [0.5]),
                                 weights=blk.get("weights", [1.0]),
                                 constant=blk.get("constant"),
                                 log_limit=bool(blk.get("log_limit", False)))
    y_grid = np.geomspace(blk.get("y_min", 0.05), blk.get("y_max", 20.0),
                          blk.get("n_y", 64))
    t_grid = np.arange(lat.n_steps + 1) * lat.dt
    eta0 = market.eta_sigma[0]
    D, P = utility.decreasing_utility(mix, eta0, y_grid, t_grid, r_path=market.r)
    container.save_field(D, outdir / "dual.bin", role="dual", market=market)
    container.export_summary_csv(outdir / "dual_summary.csv", D.times, D.y_grid, D.values)
    increase = float(np.diff(D.values, axis=1).max())
    entries.append(_entry("dual-monotone-in-t", "decreasing utility time decay",
                          max(increase, 0.0), 1e-12, _verdict(increase <= 1e-12),
                          1, lat.dt))
    rep = verify.dual_drift_residual(D, market)
    entries.append(_entry("dual-drift-analytic", "dual drift constraint",
                          rep.mean_abs_residual, rep.threshold,
                          _verdict(rep.passed), rep.n_paths, rep.dt))


def run(config_path, seed=None, paths=None, dt_levels=None, out=None) -> int:
    cfg = load_config(config_path)
    lat_cfg = cfg["lattice"]
    if seed is not None:
        lat_cfg["seed"] = int(seed)
    if paths is not None:
        lat_cfg["n_paths"] = int(paths)
    if dt_levels is not None:
        cfg.setdefault("verification", {})["dt_levels"] = int(dt_levels)
    root = Path(out or cfg.get("output", {}).get("dir")
                or os.environ.get(OUT_ENV, "flowutility-out"))
    outdir = root / cfg["name"]
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    family = cfg.get("family", "flow")
    try:
        market = _build_market(cfg)
        lat = lattice.generate_lattice(lat_cfg["n_paths"], lat_cfg["n_steps"],
                                       lat_cfg["dt"], market.n, lat_cfg["seed"])
        if family == "flow":
            _run_flow_family(cfg, market, lat, outdir, entries)
        elif family in ("zn-power", "zn-exponential"):
            _run_zn_family(cfg, market, lat, outdir, entries)
        elif family == "decreasing":
            _run_decreasing_family(cfg, market, lat, outdir, entries)
        else:
            raise InvalidConfigError(f"unknown family {family!r}")
    except FlowUtilityError as exc:
        print(f"error [{family} pipeline]: {exc}", file=sys.stderr)
        print("hint: check grids/coefficients in the config; rerun with fewer "
              "paths to localize", file=sys.stderr)
        return 2
    report_doc = {
        "experiment": cfg["name"],
        "config_hash": cfg["_hash"],
        "entries": [{k: e[k] for k in _ENTRY_KEYS} for e in entries],
        "caveat": ("statistical verdicts certify bounded-horizon martingale "
                   "behavior and finite-sample moments only"),
    }
    (outdir / REPORT_NAME).write_text(json.dumps(report_doc, sort_keys=True, indent=1),
                                      encoding="utf-8")
    ok = all(e["verdict"] == "pass" for e in entries)
    for e in entries:
        print(f"{cfg['name']}: {e['name']}: {e['verdict']} "
              f"(residual {e['residual']:.3g}, threshold {e['threshold']:.3g})")
    return 0 if ok else 1


def report(input_dir, out=None) -> int:
    """Consolidate VerificationReport files into CSV + text table."""
    root = Path(input_dir)
    rows = []
    status = 0
    report_files = sorted(root.glob(f"**/{REPORT_NAME}"))
    if not report_files:
        status = 1
    for path in report_files:
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            for e in doc["entries"]:
                rows.append([doc["experiment"]] + [e[k] for k in _ENTRY_KEYS])
        except (json.JSONDecodeError, KeyError):
            rows.append([str(path.parent.name), "absent", "", "", "", "absent", "", ""])
            status = 1
    rows.sort(key=lambda r: (str(r[0]), str(r[1])))
    out_path = Path(out) if out else root / "summary.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["experiment"] + list(_ENTRY_KEYS))
        writer.writerows(rows)
    n_pass = sum(1 for r in rows if r[5] == "pass")
    n_fail = sum(1 for r in rows if r[5] in ("fail", "absent"))
    width = max([len(str(r[0])) for r in rows] + [10])
    print(f"{'experiment':<{width}}  {'identity':<28}  verdict")
    for r in rows:
        print(f"{str(r[0]):<{width}}  {str(r[1]):<28}  {r[5]}")
    print(f"{n_pass} pass, {n_fail} fail/absent")
    if n_fail:
        status = 1
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowutility",
                                     description="simulate, build and verify "
                                                 "consistent utility fields")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--paths", type=int)
    p_run.add_argument("--dt-levels", type=int, dest="dt_levels")
    p_run.add_argument("--out")
    p_rep = sub.add_parser("report", help="consolidate verification reports")
    p_rep.add_argument("dir")
    p_rep.add_argument("--out")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, seed=args.seed, paths=args.paths,
                   dt_levels=args.dt_levels, out=args.out)
    return report(args.dir, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
