"""Verified kernel bounds: the distance-behaviour constants, the bound
right-hand sides assembled from the explicit constant chain, and pass/fail
reports comparing them against computed kernels.

Every verifier returns a BoundReport; failures are carried with diagnostics,
never raised.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry as geo, kernels as ker, logsob as ls
from .flows import FlowTrajectory, _as_warped_state
from .geometry import ScalarField
from .kernels import KernelSlice, SolverConfig, WeightSpec
from .logsob import LogSobConstants


@dataclass
class BoundReport:
    """One verified inequality: LHS, RHS, margin, parameters, provenance."""

    kind: str
    params: dict
    lhs: float
    rhs: float
    constants: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    report_tol: float = 1e-9

    @property
    def margin_ratio(self) -> float:
        return self.rhs / self.lhs if self.lhs > 0 else math.inf

    @property
    def passed(self) -> bool:
        return self.margin_ratio >= 1.0 - self.report_tol

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": _jsonable(self.params),
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin_ratio": self.margin_ratio,
            "passed": self.passed,
            "constants": _jsonable(self.constants),
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = float(v)
        elif isinstance(v, dict):
            out[k] = _jsonable(v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# distance-behaviour constants
# ---------------------------------------------------------------------------

def _lambda_samples(traj: FlowTrajectory, s: float, t: float, refine_tol: float,
                    evaluate, max_rounds: int = 6):
    """Sup of ``evaluate(lambda)`` over stored times in [s, t], refined by
    midpoint insertion until the sup moves less than refine_tol relatively."""
    lams = [s] + [float(x) for x in traj.times if s < x < t] + [t]
    vals = {lam: evaluate(lam) for lam in lams}
    best = max(vals.values())
    for _ in range(max_rounds):
        lams_sorted = sorted(vals)
        mids = [0.5 * (a + b) for a, b in zip(lams_sorted, lams_sorted[1:])]
        for lam in mids:
            vals[lam] = evaluate(lam)
        new_best = max(vals.values())
        if abs(new_best - best) <= refine_tol * max(abs(best), 1e-30):
            return new_best
        best = new_best
    return best


def max_distance_gradient(
    traj: FlowTrajectory,
    y,
    s: float,
    t: float,
    band_cells: int = 2,
    refine_tol: float = 1e-4,
) -> float:
    """Sup over lambda in [s,t] and over the grid (cut-locus band excluded)
    of the endpoint-metric distance gradient measured at g(lambda)."""
    state_t = traj.state_at(t)
    dfield = geo.distance_field(state_t, y)
    mask = geo.pole_band_mask(traj.model, band_cells)

    def evaluate(lam):
        ratio = geo.cross_metric_gradient_norm(state_t, dfield, traj.state_at(lam))
        return float(np.max(ratio.values[mask]))

    return _lambda_samples(traj, s, t, refine_tol, evaluate)


def distance_growth_rate(
    traj: FlowTrajectory,
    x,
    y,
    s: float,
    t: float,
    refine_tol: float = 1e-4,
) -> float:
    """Quarter of the largest positive time-derivative of d(z, y) over
    lambda in [s,t] and z in the closed ball of radius d(x, y) at g(lambda).

    The time derivative is the max of forward/backward differences on the
    stored trajectory (upper-biased, which only weakens the verified bound).
    """
    times = traj.times

    def evaluate(lam):
        i = int(np.clip(np.searchsorted(times, lam) - 1, 0, len(times) - 2))
        spans = []
        for a, b in ((i, i + 1), (max(i - 1, 0), i)):
            if times[b] > times[a]:
                spans.append((a, b))
        worst = 0.0
        st_lam = traj.state_at(lam)
        radius = geo.distance(st_lam, y, x)
        ball = geo.distance_field(st_lam, y).values <= radius + 1e-12
        for a, b in spans:
            da = geo.distance_field(traj.states[a], y).values
            db = geo.distance_field(traj.states[b], y).values
            rate = (db - da) / (times[b] - times[a])
            worst = max(worst, float(np.max(rate[ball])))
        return worst

    sup = _lambda_samples(traj, s, t, refine_tol, evaluate)
    return 0.25 * max(sup, 0.0)


# ---------------------------------------------------------------------------
# bound verifiers
# ---------------------------------------------------------------------------

def _consts_dict(consts: LogSobConstants) -> dict:
    return consts.to_json_dict()


def verify_weighted_sup(
    traj: FlowTrajectory,
    weight: WeightSpec,
    y,
    s: float,
    t: float,
    consts: LogSobConstants,
    cfg: Optional[SolverConfig] = None,
    constant_scale: float = 1.0,
) -> BoundReport:
    """Sup bound for the weighted kernel:
    max K <= C (t-s)^(-n/2) exp(2 a^2 (t-s))."""
    cfg = cfg or SolverConfig()
    slice_ = ker.solve_weighted_kernel(traj, weight, y, s, t, cfg)
    lhs = slice_.max_value()
    span = t - s
    C = constant_scale * ls.kernel_bound_constant(consts)
    rhs = C * span ** (-consts.n / 2.0) * math.exp(2.0 * weight.alpha ** 2 * span)
    return BoundReport(
        kind="weighted_sup",
        params={"alpha": weight.alpha, "s": s, "t": t},
        lhs=lhs,
        rhs=rhs,
        constants=_consts_dict(consts),
        diagnostics={"solver": slice_.solver, "delta": slice_.delta,
                     "min_value": slice_.min_value},
    )


def verify_on_diagonal(
    traj: FlowTrajectory,
    y,
    s: float,
    t: float,
    consts: LogSobConstants,
    cfg: Optional[SolverConfig] = None,
    constant_scale: float = 1.0,
    use_oracle: bool = False,
) -> BoundReport:
    """max H <= C (t-s)^(-n/2), the weight-free specialization."""
    slice_ = _plain_slice(traj, y, s, t, cfg, use_oracle)
    span = t - s
    C = constant_scale * ls.kernel_bound_constant(consts)
    rhs = C * span ** (-consts.n / 2.0)
    return BoundReport(
        kind="on_diagonal",
        params={"s": s, "t": t},
        lhs=slice_.max_value(),
        rhs=rhs,
        constants=_consts_dict(consts),
        diagnostics={"solver": slice_.solver},
    )


def _plain_slice(traj, y, s, t, cfg, use_oracle) -> KernelSlice:
    if use_oracle:
        if traj.model.kind == "flat_torus":
            return ker.oracle_torus_kernel(traj.model, y, s, t)
        if traj.model.kind == "round_sphere":
            return ker.oracle_sphere_kernel(traj, y, s, t)
    return ker.solve_heat_kernel(traj, y, s, t, cfg or SolverConfig())


def verify_gaussian(
    traj: FlowTrajectory,
    y,
    s: float,
    t: float,
    variant: str,
    consts: LogSobConstants,
    cfg: Optional[SolverConfig] = None,
    mu_power: float = 2.0,
    constant_scale: float = 1.0,
    use_oracle: bool = False,
    x_far=None,
    band_cells: int = 2,
) -> BoundReport:
    """Pointwise Gaussian bound over the grid.

    variant "static_weight": exponent -d^2 / (8 mu^power (t-s)) with mu the
    distance-gradient supremum (the displayed statement uses power 2; the
    power is configurable because the derivation supports the stronger 1).
    variant "moving_weight": exponent -d^2 / (8 (t-s)) + eta d with eta the
    distance-growth constant for the largest admissible ball.
    """
    if variant not in ("static_weight", "moving_weight"):
        raise ValueError(f"unknown gaussian variant {variant!r}")
    slice_ = _plain_slice(traj, y, s, t, cfg, use_oracle)
    state_t = traj.state_at(t)
    dist = geo.distance_field(state_t, y).values
    if slice_.model is not traj.model and slice_.model.kind == "warped_sphere":
        dist = geo.distance_field(_as_warped_state(state_t), y).values
    span = t - s
    C = constant_scale * ls.kernel_bound_constant(consts)
    pref = C * span ** (-consts.n / 2.0)
    params = {"s": s, "t": t, "variant": variant}
    if variant == "static_weight":
        grad_sup = max_distance_gradient(traj, y, s, t, band_cells=band_cells)
        rhs_field = pref * np.exp(-(dist ** 2) / (8.0 * grad_sup ** mu_power * span))
        params["grad_sup"] = grad_sup
        params["mu_power"] = mu_power
    else:
        if x_far is None:
            x_far = _farthest_point(traj.model, state_t, y)
        growth = distance_growth_rate(traj, x_far, y, s, t)
        rhs_field = pref * np.exp(-(dist ** 2) / (8.0 * span) + growth * dist)
        params["growth_rate"] = growth
    vals = slice_.values.values
    # points whose kernel value sits below the solver's absolute resolution
    # floor cannot be verified (the true values underflow doubles there)
    floor_rel = slice_.meta.get("floor_rel", 1e-12)
    if slice_.solver == "oracle":
        floor_rel = max(
            slice_.meta.get("tail_bound_rel", 0.0), 1e-14
        )
    floor = floor_rel * float(np.max(vals))
    mask = vals.ravel() >= floor
    ratio = np.where(
        mask, rhs_field.ravel() / np.maximum(vals.ravel(), floor), np.inf
    )
    worst = int(np.argmin(ratio))
    lhs = float(vals.ravel()[worst])
    rhs = float(rhs_field.ravel()[worst])
    return BoundReport(
        kind=(
            "gaussian_static_weight" if variant == "static_weight"
            else "gaussian_moving_weight"
        ),
        params=params,
        lhs=lhs,
        rhs=rhs,
        constants=_consts_dict(consts),
        diagnostics={
            "worst_flat_index": worst,
            "worst_distance": float(dist.ravel()[worst]),
            "below_floor_points": int(np.size(mask) - np.sum(mask)),
            "resolution_floor": floor,
            "solver": slice_.solver,
        },
    )


def _farthest_point(model, state_t, y):
    if model.kind == "flat_torus":
        return np.asarray(y, dtype=float) + 0.5 * np.asarray(model.periods)
    L = math.pi * model.radius if model.kind == "round_sphere" else model.length
    return L if float(y) < 0.5 * L else 0.0


def verify_sup_from_l2(
    traj: FlowTrajectory,
    weight: Optional[WeightSpec],
    t0: float,
    t1: float,
    u0: ScalarField,
    consts: LogSobConstants,
    cfg: Optional[SolverConfig] = None,
    constant_scale: float = 1.0,
) -> BoundReport:
    """Contraction from L2 at t0 to sup at t1 for the weighted evolution."""
    cfg = cfg or SolverConfig()
    out = ker.evolve_weighted_solution(traj, weight, u0, t0, t1, cfg)
    lhs = float(np.max(np.abs(out.values)))
    state0 = _norm_state(traj, t0)
    span = t1 - t0
    alpha = weight.alpha if weight is not None else 0.0
    rhs = (
        constant_scale
        * ls.l2_to_sup_constant(consts)
        * span ** (-consts.n / 4.0)
        * math.exp(2.0 * alpha * alpha * span)
        * geo.lp_norm(state0, u0.values, 2.0)
    )
    return BoundReport(
        kind="sup_from_l2",
        params={"alpha": alpha, "t0": t0, "t1": t1},
        lhs=lhs,
        rhs=rhs,
        constants=_consts_dict(consts),
        diagnostics={},
    )


def verify_l2_from_l1(
    traj: FlowTrajectory,
    weight: Optional[WeightSpec],
    t0: float,
    t1: float,
    u0: ScalarField,
    consts: LogSobConstants,
    cfg: Optional[SolverConfig] = None,
    constant_scale: float = 1.0,
) -> BoundReport:
    """Contraction from L1 at t0 to L2 at t1 for the weighted evolution."""
    cfg = cfg or SolverConfig()
    out = ker.evolve_weighted_solution(traj, weight, u0, t0, t1, cfg)
    state1 = _norm_state(traj, t1)
    lhs = geo.lp_norm(state1, out.values, 2.0)
    state0 = _norm_state(traj, t0)
    span = t1 - t0
    alpha = weight.alpha if weight is not None else 0.0
    rhs = (
        constant_scale
        * ls.l1_to_l2_constant(consts)
        * span ** (-consts.n / 4.0)
        * math.exp(2.0 * alpha * alpha * span)
        * geo.lp_norm(state0, u0.values, 1.0)
    )
    return BoundReport(
        kind="l2_from_l1",
        params={"alpha": alpha, "t0": t0, "t1": t1},
        lhs=lhs,
        rhs=rhs,
        constants=_consts_dict(consts),
        diagnostics={},
    )


def _norm_state(traj, t):
    st = traj.state_at(t)
    if st.model.kind == "round_sphere":
        return _as_warped_state(st)
    return st


def chained_two_step_factor(consts: LogSobConstants, alpha: float, span: float):
    """(ultra on the second half) x (L1->L2 on the first half) equals the
    assembled kernel constant: returns (chained, direct) for the identity
    check C = 2^(n/2) C1 C2."""
    half = 0.5 * span
    n = consts.n
    ultra = (
        ls.l2_to_sup_constant(consts)
        * half ** (-n / 4.0)
        * math.exp(2.0 * alpha * alpha * half)
    )
    l1l2 = (
        ls.l1_to_l2_constant(consts)
        * half ** (-n / 4.0)
        * math.exp(2.0 * alpha * alpha * half)
    )
    direct = (
        ls.kernel_bound_constant(consts)
        * span ** (-n / 2.0)
        * math.exp(2.0 * alpha * alpha * span)
    )
    return ultra * l1l2, direct


# ---------------------------------------------------------------------------
# report suites
# ---------------------------------------------------------------------------

def assemble_report_suite(
    traj: FlowTrajectory,
    consts: LogSobConstants,
    checks: list,
    alphas: list,
    pairs: list,
    y,
    weight_builder=None,
    cfg: Optional[SolverConfig] = None,
    mu_power: float = 2.0,
    constant_scale: float = 1.0,
    workers: int = 1,
    bump_width: float = 0.35,
    band_cells: int = 2,
):
    """Run the requested verifications over the (alpha, s, t) grid.

    weight_builder(alpha, s, t) must return a certified WeightSpec for the
    weighted checks. Partial failures are collected in the reports, and
    exceptions are recorded as failed reports rather than raised.
    """
    cfg = cfg or SolverConfig()
    tasks = []
    for (s, t) in pairs:
        if "on_diagonal" in checks:
            tasks.append(("on_diagonal", 0.0, s, t))
        for kind in ("gaussian_static_weight", "gaussian_moving_weight"):
            if kind in checks:
                tasks.append((kind, 0.0, s, t))
        for alpha in alphas:
            if "weighted_sup" in checks:
                tasks.append(("weighted_sup", alpha, s, t))
            if "sup_from_l2" in checks:
                tasks.append(("sup_from_l2", alpha, s, t))
            if "l2_from_l1" in checks:
                tasks.append(("l2_from_l1", alpha, s, t))

    def bump_data(s):
        state = _norm_state(traj, s)
        d = geo.distance_field(state, y).values
        return ScalarField(np.exp(-(d / bump_width) ** 2))

    def run(task):
        kind, alpha, s, t = task
        try:
            if kind == "on_diagonal":
                return verify_on_diagonal(
                    traj, y, s, t, consts, cfg, constant_scale
                )
            if kind == "gaussian_static_weight":
                return verify_gaussian(
                    traj, y, s, t, "static_weight", consts, cfg,
                    mu_power=mu_power, constant_scale=constant_scale,
                    band_cells=band_cells,
                )
            if kind == "gaussian_moving_weight":
                return verify_gaussian(
                    traj, y, s, t, "moving_weight", consts, cfg,
                    constant_scale=constant_scale,
                )
            weight = None
            if alpha != 0.0:
                if weight_builder is None:
                    raise ValueError("weighted checks need a weight builder")
                weight = weight_builder(alpha, s, t)
                if not weight.lipschitz_certified:
                    raise ValueError("weight failed certification")
            if kind == "weighted_sup":
                if weight is None:
                    weight = WeightSpec(alpha=0.0, profile=np.zeros(1))
                    weight.lipschitz_certified = True
                    rep = verify_on_diagonal(
                        traj, y, s, t, consts, cfg, constant_scale
                    )
                    rep.kind = "weighted_sup"
                    rep.params["alpha"] = 0.0
                    return rep
                return verify_weighted_sup(
                    traj, weight, y, s, t, consts, cfg, constant_scale
                )
            if kind == "sup_from_l2":
                return verify_sup_from_l2(
                    traj, weight, s, t, bump_data(s), consts, cfg, constant_scale
                )
            if kind == "l2_from_l1":
                return verify_l2_from_l1(
                    traj, weight, s, t, bump_data(s), consts, cfg, constant_scale
                )
            raise ValueError(f"unknown check {kind!r}")
        except Exception as exc:  # collected, not thrown
            return BoundReport(
                kind=kind,
                params={"alpha": alpha, "s": s, "t": t},
                lhs=1.0,
                rhs=0.0,
                diagnostics={"error": repr(exc)},
            )

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, tasks))
    else:
        reports = [run(t) for t in tasks]
    summary = summarize_reports(reports)
    return reports, summary


def summarize_reports(reports) -> dict:
    passed = sum(1 for r in reports if r.passed)
    worst = min((r.margin_ratio for r in reports), default=math.inf)
    return {
        "total": len(reports),
        "passed": passed,
        "failed": len(reports) - passed,
        "worst_margin_ratio": worst,
    }


def reports_to_json(reports, path=None):
    payload = [r.to_json_dict() for r in reports]
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
