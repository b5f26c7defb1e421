"""Scenario-driven command line: configure geometry/flow/kernel/bound runs,
execute suites, and emit reports plus plot-ready data files.

Exit codes: 0 success, 1 compute failure (partial artifacts preserved),
2 invalid configuration, 4 bound violations under --strict.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, bounds as bd, flows, geometry as geo, kernels as ker
from . import logsob as ls, scenarios as sc
from ._core import BACKEND
from .geometry import ScalarField


def _canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:16]


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _constants_for(cfg, rng):
    gcfg = dict(cfg["geometry"])
    coarse = gcfg.get("constants_resolution", gcfg["resolution"])
    gcfg["resolution"] = coarse
    model = sc.build_model(gcfg)
    state0 = geo.initial_state(model)
    ccfg = cfg.get("constants", {})
    overrides = ccfg.get("overrides") or {}
    if "sobolev_constant" in overrides:
        estimate = overrides["sobolev_constant"]
        diag = {"direction": "override", "evaluations": 0}
    else:
        estimate, diag = ls.estimate_sobolev_constant(
            state0, ccfg.get("trial_budget", 64), rng
        )
    consts = ls.LogSobConstants.from_state(
        state0,
        cfg["flow"]["horizon"],
        estimate,
        safety_factor=ccfg.get("safety_factor", 1.5),
    )
    return consts, diag


def _solver_cfg(cfg) -> ker.SolverConfig:
    kcfg = cfg.get("kernels", {})
    return ker.SolverConfig(
        dt=kcfg.get("dt"),
        delta_coeff=kcfg.get("delta_coeff", 4.0),
        delta_cap_frac=kcfg.get("delta_cap_frac", 0.125),
        truncation=kcfg.get("truncation", 1e-12),
    )


def _bound_profiles(traj, consts, pairs, y, out_dir, mu_power, cfg_solver, formats):
    """Plot-ready curve tables: kernel values against both bound RHS
    profiles as functions of the endpoint distance."""
    for (s, t) in pairs:
        sl = ker.solve_heat_kernel(traj, y, s, t, cfg_solver)
        state_t = traj.state_at(t)
        if sl.model.kind == "warped_sphere" and traj.model.kind == "round_sphere":
            state_t = flows._as_warped_state(state_t)
        dist = geo.distance_field(state_t, y).values.ravel()
        vals = sl.values.values.ravel()
        span = t - s
        C = ls.kernel_bound_constant(consts)
        pref = C * span ** (-consts.n / 2.0)
        grad_sup = bd.max_distance_gradient(traj, y, s, t)
        growth = 0.0  # emitted bound profile uses the computed growth rate
        try:
            xf = bd._farthest_point(traj.model, state_t, y)
            growth = bd.distance_growth_rate(traj, xf, y, s, t)
        except Exception:
            pass
        rhs_static = pref * np.exp(
            -(dist ** 2) / (8.0 * grad_sup ** mu_power * span)
        )
        rhs_moving = pref * np.exp(-(dist ** 2) / (8.0 * span) + growth * dist)
        order = np.argsort(dist)
        step = max(1, len(order) // 4000)
        order = order[::step]
        tag = f"s{s:g}_t{t:g}".replace(".", "p")
        if "csv" in formats:
            _write_csv(
                os.path.join(out_dir, f"bound_profile_{tag}.csv"),
                ["distance", "kernel", "bound_static_weight", "bound_moving_weight"],
                [
                    (f"{dist[i]:.8g}", f"{vals[i]:.10g}",
                     f"{rhs_static[i]:.10g}", f"{rhs_moving[i]:.10g}")
                    for i in order
                ],
            )
            sl.save_csv(os.path.join(out_dir, f"kernel_slice_{tag}.csv"))
        if "json" in formats:
            sl.save_json(os.path.join(out_dir, f"kernel_slice_{tag}.json"))


def _entropy_outputs(cfg, traj, out_dir, rng, formats):
    ecfg = cfg.get("entropy", {})
    if not ecfg.get("enabled", False):
        return {}
    t_star = ecfg["t_star"]
    n = traj.model.n
    sigma = ecfg.get("sigma")
    if sigma is None:
        # soliton pairing on shrinking spheres: tau = r^2 / (2 (n-1))
        r2 = traj.radius_at(t_star) ** 2
        sigma = r2 / (2.0 * (n - 1))
    state_star = (
        flows._as_warped_state(traj.state_at(t_star))
        if traj.model.kind == "round_sphere"
        else traj.state_at(t_star)
    )
    src = sc.source_point(traj.model)
    d = geo.distance_field(state_star, src).values
    dens = np.exp(-(d * d) / (4.0 * 0.03))
    dens /= geo.integrate(state_star, dens)
    final = ls.EntropyState(state_star, sigma, ScalarField(dens))
    seq, truncated = ls.evolve_conjugate_density(traj, final, t_star)
    times, Ws, rates, min_rate = ls.check_w_monotonicity(traj, seq)
    if "csv" in formats:
        rows = [(f"{t:.8g}", f"{w:.10g}") for t, w in zip(times, Ws)]
        _write_csv(os.path.join(out_dir, "w_trace.csv"), ["time", "w_entropy"], rows)
    pair = ecfg.get("infimum_pair")
    mu_info = None
    if pair:
        mu_info = ls.check_entropy_infimum_monotonicity(
            traj, pair[0], pair[1], budget=ecfg.get("budget", 300), rng=rng
        )
        _write_json(os.path.join(out_dir, "mu_star.json"), mu_info)
    return {
        "w_min_rate": min_rate,
        "w_truncated": truncated,
        "mass_residual_max": max(e.normalization_residual for _, e in seq),
        "infimum_monotonicity": mu_info,
    }


def run_scenario(cfg: dict, out_dir: str, seed=None, workers: int = 1,
                 strict: bool = False) -> int:
    os.makedirs(out_dir, exist_ok=True)
    if seed is not None:
        cfg = dict(cfg)
        cfg["seed"] = seed
    rng = np.random.default_rng(cfg["seed"])
    chash = config_hash(cfg)
    formats = cfg["output"].get("formats", ["json", "csv"])
    _write_json(os.path.join(out_dir, "config_used.json"), cfg)
    _write_json(os.path.join(out_dir, "config_schema.json"), sc.CONFIG_SCHEMA)

    t_begin = time.time()
    traj = sc.build_trajectory(cfg)
    traj.save(os.path.join(out_dir, "trajectory.json"))

    times, mins, bad = flows.monitor_min_trace(traj)
    if "csv" in formats:
        _write_csv(
            os.path.join(out_dir, "min_trace.csv"),
            ["time", "min_trace"],
            [(f"{t:.8g}", f"{m:.10g}") for t, m in zip(times, mins)],
        )

    consts, cs_diag = _constants_for(cfg, rng)
    consts_payload = consts.to_json_dict()
    consts_payload["config_hash"] = chash
    consts_payload["estimator"] = cs_diag
    _write_json(os.path.join(out_dir, "constants.json"), consts_payload)

    summary = {
        "config_hash": chash,
        "trajectory": {
            "stored_times": len(traj.times),
            "truncated": traj.truncated,
            "min_trace_violations": int(len(bad)),
            "volume_identity_residual": flows.check_volume_evolution(traj),
        },
    }

    reports = []
    if "bounds" in cfg:
        bcfg = cfg["bounds"]
        y = sc.source_point(traj.model)
        builder = sc.weight_builder_for(traj, cfg)
        cfg_solver = _solver_cfg(cfg)
        constant_scale = (cfg.get("constants", {}).get("overrides") or {}).get(
            "constant_scale", 1.0
        )
        reports, bsummary = bd.assemble_report_suite(
            traj, consts,
            checks=bcfg["checks"],
            alphas=bcfg["alphas"],
            pairs=[tuple(p) for p in bcfg["pairs"]],
            y=y,
            weight_builder=builder,
            cfg=cfg_solver,
            mu_power=bcfg.get("mu_power", 2),
            constant_scale=constant_scale,
            workers=workers,
            band_cells=bcfg.get("band_cells", 2),
        )
        for r in reports:
            r.constants["config_hash"] = chash
        if "json" in formats:
            bd.reports_to_json(reports, os.path.join(out_dir, "reports.json"))
        if "csv" in formats:
            _write_csv(
                os.path.join(out_dir, "summary.csv"),
                ["kind", "alpha", "s", "t", "lhs", "rhs", "margin_ratio", "passed"],
                [
                    (
                        r.kind,
                        r.params.get("alpha", ""),
                        r.params.get("s", r.params.get("t0", "")),
                        r.params.get("t", r.params.get("t1", "")),
                        f"{r.lhs:.10g}",
                        f"{r.rhs:.10g}",
                        f"{r.margin_ratio:.6g}",
                        r.passed,
                    )
                    for r in reports
                ],
            )
        summary["bounds"] = bsummary
        summary["grad_sup"] = bd.max_distance_gradient(
            traj, y, bcfg["pairs"][0][0], bcfg["pairs"][0][1]
        )
        try:
            xf = bd._farthest_point(traj.model, traj.state_at(0.0), y)
            summary["growth_rate"] = bd.distance_growth_rate(
                traj, xf, y, bcfg["pairs"][0][0], bcfg["pairs"][0][1]
            )
        except Exception as exc:
            summary["growth_rate_error"] = repr(exc)
        _bound_profiles(
            traj, consts, [tuple(p) for p in bcfg["pairs"]], y, out_dir,
            bcfg.get("mu_power", 2), cfg_solver, formats,
        )

    summary["entropy"] = _entropy_outputs(cfg, traj, out_dir, rng, formats)
    _write_json(os.path.join(out_dir, "run_summary.json"), summary)
    # wall-clock data lives with the timestamp, outside the deterministic files
    _write_json(
        os.path.join(out_dir, "run_meta.json"),
        {
            "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "elapsed_seconds": round(time.time() - t_begin, 3),
            "package_version": __version__,
            "core_backend": BACKEND,
            "config_hash": chash,
        },
    )
    failed = sum(1 for r in reports if not r.passed)
    if strict and failed:
        return 4
    return 0


def describe_constants(inputs: dict) -> str:
    consts = ls.LogSobConstants(
        n=int(inputs.get("n", 3)),
        sobolev_constant=inputs.get("cs", 0.4) * inputs.get("safety", 1.5),
        sobolev_estimate=inputs.get("cs", 0.4),
        safety_factor=inputs.get("safety", 1.5),
        horizon=inputs.get("horizon", 0.3),
        volume0=inputs.get("volume", (2 * math.pi) ** 3),
        min_trace0=inputs.get("min_trace", 0.0),
        max_neg_trace0=inputs.get("max_neg_trace", 0.0),
    )
    n = consts.n
    lines = [
        "log-Sobolev constants (all explicit; see README for provenance)",
        f"  inputs: n={n} C_S(estimate)={consts.sobolev_estimate:g} "
        f"safety={consts.safety_factor:g} -> C_S(used)={consts.sobolev_constant:g}",
        f"          horizon={consts.horizon:g} volume0={consts.volume0:g} "
        f"min_trace0={consts.min_trace0:g} max_neg_trace0={consts.max_neg_trace0:g}",
        f"  A = (n/2)(2 ln C_S + ln n - 1)              = {consts.a_const:.10g}",
        f"  B = max(4 C_S^-2 Vol^(-2/n) - min S0, 0)    = {consts.b_const:.10g}"
        f"  (raw {consts.b_raw:.10g})",
        f"  C1 = exp((2B/3 + maxS0^-) T + A/2 + n/2)    = {ls.l2_to_sup_constant(consts):.10g}",
        f"  C2 = exp(((1/2 + 1/(32 ln2 - 16)) B + maxS0^-) T + A/2"
        f" + (n/4) ln(2 ln2 - 1) + (n/2)(1 + ln2)) = {ls.l1_to_l2_constant(consts):.10g}",
        f"  C  = 2^(n/2) C1 C2                          = {ls.kernel_bound_constant(consts):.10g}",
    ]
    if consts.b_const == 0.0 and consts.max_neg_trace0 == 0.0:
        lines.append(
            f"  note: B = 0 and maxS0^- = 0, so C1 = exp(A/2 + n/2) "
            f"= {math.exp(0.5 * consts.a_const + 0.5 * n):.10g}, horizon-independent"
        )
    return "\n".join(lines)


def _parse_inputs(text):
    out = {}
    if not text:
        return out
    for part in text.split(","):
        key, _, val = part.partition("=")
        out[key.strip()] = float(val)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowheat",
        description="heat-kernel bound verification on evolving model geometries",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario config (path or bundled name)")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out-dir", default="flowheat-out")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument(
        "--strict", action="store_true", help="nonzero exit on any bound violation"
    )

    sub.add_parser("list-scenarios", help="list bundled scenario names")

    p_desc = sub.add_parser(
        "describe-constants", help="print the explicit constant table"
    )
    p_desc.add_argument(
        "--inputs",
        default="",
        help="comma list like n=3,cs=0.4,safety=1.5,horizon=0.3,volume=248.05,"
             "min_trace=0,max_neg_trace=0",
    )

    sub.add_parser("config-schema", help="print the scenario config schema")

    args = parser.parse_args(argv)
    if args.command == "list-scenarios":
        for name in sc.bundled_names():
            print(name)
        return 0
    if args.command == "describe-constants":
        print(describe_constants(_parse_inputs(args.inputs)))
        return 0
    if args.command == "config-schema":
        print(json.dumps(sc.CONFIG_SCHEMA, indent=1, sort_keys=True))
        return 0
    # run
    try:
        cfg = sc.load_config(args.config)
    except sc.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        return run_scenario(
            cfg, args.out_dir, seed=args.seed, workers=args.workers,
            strict=args.strict,
        )
    except Exception as exc:  # partial artifacts stay on disk
        print(f"compute failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
