"""Fundamental solutions of the (weighted) heat operator along a trajectory.

Solvers by model kind: FFT-spectral on flat tori (exact mode decay), zonal
spectral or Crank-Nicolson finite differences on spheres and warped products.
Analytic oracles (lattice Gaussian sums on tori, zonal mode sums on round
spheres) carry certified truncation tails and back every solver test.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as _fft

from . import geometry as geo
from ._core import tridiag_matvec, tridiag_solve
from .flows import FlowTrajectory, _as_warped_state
from .geometry import ManifoldModel, MetricState, ScalarField


class KernelError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass
class WeightSpec:
    """Weight data for the conjugated operator: the multiplier is
    exp(alpha * profile) with the profile 1-Lipschitz in the flow metric.

    For time-dependent weights ``profiles``/``times`` hold sampled profiles;
    ``certify`` evaluates the gradient bound on the grid and sets the flag.
    """

    alpha: float
    profile: Optional[np.ndarray] = None
    profiles: Optional[list] = None
    times: Optional[np.ndarray] = None
    lipschitz_certified: bool = False
    grid_tol: float = 1e-6
    max_gradient: float = float("nan")

    @property
    def time_dependent(self) -> bool:
        return self.profiles is not None

    def profile_at(self, t: float) -> np.ndarray:
        if not self.time_dependent:
            return self.profile
        ts = self.times
        if t <= ts[0]:
            return self.profiles[0]
        if t >= ts[-1]:
            return self.profiles[-1]
        i = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1 - lam) * self.profiles[i] + lam * self.profiles[i + 1]

    def profile_rate(self, t: float) -> np.ndarray:
        """One-sided-in-time derivative of the profile family (max-of-sides
        would be one-sided safe; the centered average is used for evolution)."""
        if not self.time_dependent:
            return np.zeros_like(self.profile)
        ts = self.times
        i = min(max(int(np.searchsorted(ts, t)) - 1, 0), len(ts) - 2)
        return (self.profiles[i + 1] - self.profiles[i]) / (ts[i + 1] - ts[i])

    def certify(self, traj: FlowTrajectory, span=None) -> "WeightSpec":
        """Evaluate max |grad profile| over the stored times and set the flag."""
        worst = 0.0
        if span is None:
            span = (traj.times[0], traj.times[-1])
        for i, t in enumerate(traj.times):
            if t < span[0] - 1e-12 or t > span[1] + 1e-12:
                continue
            st = traj.state_at(t)
            prof = self.profile_at(t)
            g2 = geo.gradient_norm_sq(st, ScalarField(prof)).values
            worst = max(worst, float(np.sqrt(np.max(g2))))
        self.max_gradient = worst
        self.lipschitz_certified = worst <= 1.0 + self.grid_tol
        return self


def mollify_torus(model: ManifoldModel, values: np.ndarray, cells: float) -> np.ndarray:
    """Convolve with a wrapped Gaussian of width ``cells`` grid cells;
    positive averaging preserves any Lipschitz constant."""
    sigma = cells * model.periods[0] / model.resolution
    k2 = geo.torus_k2(model)
    F = _fft.fftn(values) * np.exp(-0.5 * sigma * sigma * k2)
    return _fft.ifftn(F).real


def mollify_polar(values: np.ndarray, cells: float) -> np.ndarray:
    """1-d Gaussian smoothing with even reflection at the poles."""
    N = values.shape[0] - 1
    sigma = max(cells, 1e-9)
    half = int(math.ceil(4 * sigma))
    j = np.arange(-half, half + 1)
    ker = np.exp(-0.5 * (j / sigma) ** 2)
    ker /= ker.sum()
    ext = np.concatenate((values[half:0:-1], values, values[-2: -half - 2: -1]))
    return np.convolve(ext, ker, mode="valid")


def coordinate_weight(
    model: ManifoldModel, alpha: float, mollify_cells: float = 4.0
) -> WeightSpec:
    """Torus weight profile: wrapped distance to the first-coordinate zero
    plane, smoothed to a certifiable Lipschitz profile."""
    if model.kind != "flat_torus":
        raise KernelError("coordinate weight is a torus construction")
    L = model.periods[0]
    x1 = model.axes()[0]
    prof_1d = np.minimum(x1, L - x1)
    prof = np.broadcast_to(
        prof_1d.reshape((-1,) + (1,) * (model.n - 1)), (model.resolution,) * model.n
    ).copy()
    prof = mollify_torus(model, prof, mollify_cells)
    return WeightSpec(alpha=alpha, profile=prof)


def distance_weight(
    traj: FlowTrajectory,
    y,
    alpha: float,
    t_ref: Optional[float] = None,
    clamp: Optional[float] = None,
    scale: float = 1.0,
    time_dependent: bool = False,
    mollify_cells: float = 4.0,
    span=None,
) -> WeightSpec:
    """Weight built from the distance to ``y``: min(d, clamp)/scale, smoothed.

    Time-independent: distance under g(t_ref). Time-dependent: one profile
    per stored trajectory time in ``span``.
    """
    model = traj.model

    def build(t):
        st = traj.state_at(t)
        d = geo.distance_field(st, y).values
        if clamp is not None:
            d = np.minimum(d, clamp)
        d = d / scale
        if model.kind == "flat_torus":
            return mollify_torus(model, d, mollify_cells)
        return mollify_polar(d, mollify_cells)

    if not time_dependent:
        if t_ref is None:
            raise KernelError("time-independent weight needs t_ref")
        return WeightSpec(alpha=alpha, profile=build(t_ref))
    if span is None:
        span = (traj.times[0], traj.times[-1])
    keep = [
        (i, t)
        for i, t in enumerate(traj.times)
        if span[0] - 1e-12 <= t <= span[1] + 1e-12
    ]
    profiles = [build(t) for _, t in keep]
    return WeightSpec(
        alpha=alpha, profiles=profiles, times=np.array([t for _, t in keep])
    )


# ---------------------------------------------------------------------------
# solver configuration and kernel slices
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    solver: str = "auto"  # "auto" | "spectral" | "finite_difference"
    route: str = "auto"  # weighted solves: "auto" | "conjugated" | "expanded"
    delta_coeff: float = 4.0  # delta = coeff * h^2, capped below
    delta_cap_frac: float = 0.125  # delta <= frac * (t - s)
    dt: Optional[float] = None
    nsteps_min: int = 64
    truncation: float = 1e-12
    tol: float = 1e-6


@dataclass
class KernelSlice:
    """Sampled fundamental-solution values H(., t; y, s) or its weighted
    counterpart on the spatial grid."""

    model: ManifoldModel
    source: tuple  # (y, s)
    eval_time: float
    values: ScalarField
    operator: str = "plain"  # "plain" | "weighted"
    weight: Optional[WeightSpec] = None
    solver: str = "spectral"
    delta: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def min_value(self) -> float:
        return float(np.min(self.values.values))

    def max_value(self) -> float:
        return float(np.max(self.values.values))

    def to_json_dict(self) -> dict:
        return {
            "source_time": self.source[1],
            "eval_time": self.eval_time,
            "operator": self.operator,
            "solver": self.solver,
            "delta": self.delta,
            "meta": self.meta,
            "values": self.values.values.ravel().tolist(),
            "shape": list(self.values.values.shape),
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    def save_csv(self, path) -> None:
        """Grid coordinate columns plus the kernel value column."""
        model = self.model
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if model.kind == "flat_torus":
                writer.writerow([f"x{i+1}" for i in range(model.n)] + ["value"])
                axes = model.axes()
                vals = self.values.values
                for idx in np.ndindex(*vals.shape):
                    writer.writerow(
                        [f"{axes[d][idx[d]]:.10g}" for d in range(model.n)]
                        + [f"{vals[idx]:.12g}"]
                    )
            else:
                writer.writerow(["s", "value"])
                for scoord, v in zip(model.axis(), self.values.values):
                    writer.writerow([f"{scoord:.10g}", f"{v:.12g}"])


# ---------------------------------------------------------------------------
# mollified point sources
# ---------------------------------------------------------------------------

def _delta_width(model: ManifoldModel, dt_total: float, cfg: SolverConfig) -> float:
    if model.kind == "flat_torus":
        h = min(model.periods) / model.resolution
    else:
        L = math.pi * model.radius if model.kind == "round_sphere" else model.length
        h = L / model.resolution
    return min(cfg.delta_coeff * h * h, cfg.delta_cap_frac * dt_total)


def mollified_delta(state: MetricState, y, delta: float) -> ScalarField:
    """Gaussian of variance 2*delta in normal coordinates at y, normalized
    to unit mass against the state's volume measure.

    On the torus the wrapped Gaussian is synthesized spectrally (its Fourier
    coefficients are exact Gaussians), which stays accurate even when the
    width is below the grid spacing; polar grids sample it directly.
    """
    model = state.model
    if model.kind == "flat_torus":
        vals = _torus_delta_spectrum(state, y, delta, extra_time=0.0)
        return ScalarField(vals)
    d = geo.distance_field(state, y).values
    g = np.exp(-(d * d) / (4.0 * delta))
    mass = geo.integrate(state, g)
    return ScalarField(g / mass)


def _torus_delta_spectrum(
    state: MetricState, y, delta: float, extra_time: float
) -> np.ndarray:
    """Wrapped Gaussian at y evolved by extra_time, built in Fourier space."""
    model = state.model
    c = state.data["scale"]
    grids = _torus_rfft_k(model)
    k2 = sum(g * g for g in grids)
    phase = sum(g * yi for g, yi in zip(grids, np.asarray(y, dtype=float)))
    tau = (delta + extra_time) / (c * c)
    vol = c ** model.n * float(np.prod(model.periods))
    F = np.exp(-k2 * tau) * np.exp(-1j * phase) / vol
    ncell = model.resolution ** model.n
    return _fft.irfftn(F, s=(model.resolution,) * model.n, workers=-1) * ncell


# ---------------------------------------------------------------------------
# torus spectral machinery
# ---------------------------------------------------------------------------

def _torus_rfft_k(model: ManifoldModel):
    ks = geo.torus_wavenumbers(model)
    ks = [k.copy() for k in ks]
    N = model.resolution
    ks[-1] = 2.0 * math.pi * np.fft.rfftfreq(N, d=model.periods[-1] / N)
    grids = np.meshgrid(*ks, indexing="ij")
    return grids


def _torus_heat_apply(model: ManifoldModel, values: np.ndarray, tau: float, scale: float = 1.0):
    """Exact heat semigroup on the flat torus for diffusion time tau."""
    grids = _torus_rfft_k(model)
    k2 = sum(g * g for g in grids)
    F = _fft.rfftn(values, workers=-1) * np.exp(-k2 * tau / (scale * scale))
    return _fft.irfftn(F, s=values.shape, workers=-1)


def _torus_weighted_rhs(model, u, grad_psi, zeroth, alpha):
    """First and zeroth order part 2 alpha grad(psi).grad(u) + zeroth * u."""
    F = _fft.rfftn(u, workers=-1)
    grids = _torus_rfft_k(model)
    out = zeroth * u
    for axis in range(model.n):
        du = _fft.irfftn(1j * grids[axis] * F, s=u.shape, workers=-1)
        out = out + 2.0 * alpha * grad_psi[axis] * du
    return out


def _torus_gradients(model, psi):
    F = _fft.rfftn(psi, workers=-1)
    grids = _torus_rfft_k(model)
    return [_fft.irfftn(1j * g * F, s=psi.shape, workers=-1) for g in grids]


def _torus_evolve_weighted(traj, weight, u0, t0, t1, cfg):
    """Strang splitting: exact spectral diffusion between half-steps of the
    advection/reaction part (pseudospectral Heun)."""
    model = traj.model
    alpha = weight.alpha
    psi = weight.profile_at(0.5 * (t0 + t1))
    if weight.time_dependent:
        raise KernelError("time-dependent weights use the 1-d models")
    grad_psi = _torus_gradients(model, psi)
    lap_psi = _fft.irfftn(
        -sum(g * g for g in _torus_rfft_k(model)) * _fft.rfftn(psi, workers=-1),
        s=psi.shape,
        workers=-1,
    )
    g2 = sum(g * g for g in grad_psi)
    zeroth = alpha * alpha * g2 + alpha * lap_psi
    span = t1 - t0
    # stability: advective and reaction rates are mild after mollification
    h = min(model.periods) / model.resolution
    rate = 2 * abs(alpha) / h + float(np.max(np.abs(zeroth))) + 1e-12
    dt = cfg.dt or min(span / cfg.nsteps_min, 0.25 / rate)
    nsteps = max(int(math.ceil(span / dt)), 1)
    dt = span / nsteps
    u = np.array(u0, dtype=float, copy=True)

    def b_half(u, hdt):
        k1 = _torus_weighted_rhs(model, u, grad_psi, zeroth, alpha)
        u1 = u + hdt * k1
        k2 = _torus_weighted_rhs(model, u1, grad_psi, zeroth, alpha)
        return u + 0.5 * hdt * (k1 + k2)

    for _ in range(nsteps):
        u = b_half(u, 0.5 * dt)
        u = _torus_heat_apply(model, u, dt)
        u = b_half(u, 0.5 * dt)
    return u


# ---------------------------------------------------------------------------
# 1-d (sphere / warped) machinery
# ---------------------------------------------------------------------------

def _polar_state(traj: FlowTrajectory, t: float) -> MetricState:
    st = traj.state_at(t)
    if st.model.kind == "round_sphere":
        return _as_warped_state(st)
    return st


def _weighted_rows(state, weight, t):
    """Tridiagonal rows of lap + 2 a psi_s d_s + (a^2 psi_s^2 + a lap psi)."""
    lo, di, up = geo.warped_operator_coefficients(state)
    alpha = weight.alpha
    if alpha == 0.0:
        return lo, di, up
    model = state.model
    h = model.length / model.resolution
    psi = weight.profile_at(t)
    phi = np.sqrt(state.data["gxx"])
    psi_s = geo._parity_even_derivative(psi, h) / phi
    lap_psi = geo.laplace_beltrami(state, ScalarField(psi)).values
    drift = 2.0 * alpha * psi_s / phi  # coefficient of d/dx
    adv = drift / (2 * h)
    lo = lo - adv
    up = up + adv
    # drift vanishes at the poles (psi_s odd), zeroth order is plain there
    di = di + alpha * alpha * psi_s * psi_s + alpha * lap_psi
    return lo, di, up


def _polar_evolve(traj, weight, u0, t0, t1, cfg, sample_times=None):
    """CN stepping of the (weighted) heat equation on polar models, metric
    coefficients frozen at each substep midpoint."""
    span = t1 - t0
    state0 = _polar_state(traj, t0)
    N = state0.model.resolution
    L = state0.model.length
    h = L / N
    # accuracy-driven default step; diffusion is implicit so no CFL
    dt = cfg.dt or min(span / cfg.nsteps_min, h * h * 4.0)
    nsteps = max(int(math.ceil(span / dt)), 4)
    dt = span / nsteps
    u = np.array(u0, dtype=float, copy=True)
    samples = []
    want = list(sample_times) if sample_times is not None else []
    wi = 0
    t = t0
    for k in range(nsteps):
        tm = t + 0.5 * dt
        st = _polar_state(traj, tm)
        if weight is None or weight.alpha == 0.0:
            lo, di, up = geo.warped_operator_coefficients(st)
        else:
            lo, di, up = _weighted_rows(st, weight, tm)
        rhs = u + 0.5 * dt * tridiag_matvec(lo, di, up, u)
        u = tridiag_solve(
            -0.5 * dt * lo, 1.0 - 0.5 * dt * di, -0.5 * dt * up, rhs
        )
        t += dt
        while wi < len(want) and want[wi] <= t + 1e-13:
            samples.append((want[wi], ScalarField(u.copy())))
            wi += 1
    if sample_times is not None:
        return ScalarField(u), samples
    return ScalarField(u)


# ---------------------------------------------------------------------------
# public solvers
# ---------------------------------------------------------------------------

def solve_heat_kernel(
    traj: FlowTrajectory, y, s: float, t: float, cfg: Optional[SolverConfig] = None
) -> KernelSlice:
    """Fundamental solution of the heat operator along the trajectory,
    approximated from a mollified point source at (y, s + delta)."""
    cfg = cfg or SolverConfig()
    if not (traj.times[0] - 1e-12 <= s < t <= traj.horizon + 1e-12):
        raise KernelError("need trajectory start <= s < t <= horizon")
    model = traj.model
    delta = _delta_width(model, t - s, cfg)
    state_s = traj.state_at(s)

    if model.kind == "flat_torus":
        vals = _torus_delta_spectrum(state_s, y, delta, extra_time=(t - s) - delta)
        slice_ = KernelSlice(
            model, (y, s), t, ScalarField(vals), solver="spectral", delta=delta
        )
        # spectral ringing level: the sharpest surviving mode sets the
        # absolute accuracy floor relative to the peak
        kcut = math.pi * model.resolution / max(model.periods)
        scale = state_s.data["scale"]
        slice_.meta["floor_rel"] = max(
            10.0 * math.exp(-kcut * kcut * (t - s) / (scale * scale)), 1e-12
        )
    elif model.kind == "round_sphere" and cfg.solver in ("auto", "spectral"):
        r_s = traj.radius_at(s)
        u0 = mollified_delta(state_s, y, delta)
        b = geo.zonal_analyze(u0.values)
        lam = geo.zonal_eigenvalues(len(b))
        zonal_cut = float(model.resolution)
        expo = traj.inverse_r2_integral(s, t) - delta / (r_s * r_s)
        vals = geo.zonal_synthesize(b * np.exp(-lam * expo), model.resolution)
        slice_ = KernelSlice(
            model, (y, s), t, ScalarField(vals), solver="spectral", delta=delta
        )
        slice_.meta["floor_rel"] = max(
            10.0 * math.exp(-zonal_cut * zonal_cut * max(expo, 0.0)), 1e-12
        )
    else:
        u0w = mollified_delta(_polar_state(traj, s), y, delta)
        vals = _polar_evolve(traj, None, u0w.values, s + delta, t, cfg)
        out_model = _polar_state(traj, s).model
        slice_ = KernelSlice(
            out_model, (y, s), t, vals, solver="finite_difference", delta=delta
        )
        slice_.meta["floor_rel"] = 1e-5  # second-order path, conservative
    slice_.meta["min_value"] = slice_.min_value
    return slice_


def solve_weighted_kernel(
    traj: FlowTrajectory,
    weight: WeightSpec,
    y,
    s: float,
    t: float,
    cfg: Optional[SolverConfig] = None,
) -> KernelSlice:
    """Fundamental solution of the weighted heat operator.

    alpha = 0 delegates to the plain solver (identical code path). The route
    for alpha != 0 is "conjugated" (evolve the multiplied field under the
    plain operator; time-independent profiles only) or "expanded" (evolve
    under lap + 2 a grad psi . grad + (a^2 |grad psi|^2 + a lap psi)).
    """
    cfg = cfg or SolverConfig()
    if weight.alpha == 0.0:
        out = solve_heat_kernel(traj, y, s, t, cfg)
        out.operator = "weighted"
        out.weight = weight
        return out
    if not weight.lipschitz_certified:
        raise KernelError("weight profile is not certified 1-Lipschitz")
    route = cfg.route
    if route == "auto":
        route = "expanded" if weight.time_dependent else "conjugated"
    if route == "conjugated" and weight.time_dependent:
        raise KernelError("conjugated route needs a time-independent profile")

    model = traj.model
    delta = _delta_width(model, t - s, cfg)
    psi_s = weight.profile_at(s)
    psi_y = _profile_at_point(model, psi_s, y)
    # the point source for the weighted operator carries the conjugation
    # tilt; with it the kernel relation holds exactly at any mollification
    # width, so the identity tests measure solver error, not delta width
    if model.kind == "flat_torus":
        state_s = traj.state_at(s)
        u0 = mollified_delta(state_s, y, delta).values
        tilt = np.exp(-weight.alpha * (psi_s - psi_y))
        if route == "conjugated":
            v = _torus_heat_apply(
                model, np.exp(weight.alpha * psi_y) * u0,
                (t - s) - delta, state_s.data["scale"],
            )
            vals = ScalarField(v * np.exp(-weight.alpha * psi_s))
        else:
            vals = ScalarField(
                _torus_evolve_weighted(traj, weight, tilt * u0, s + delta, t, cfg)
            )
        out_model = model
    else:
        pst = _polar_state(traj, s)
        u0 = mollified_delta(pst, y, delta).values
        tilt = np.exp(-weight.alpha * (psi_s - psi_y))
        if route == "conjugated":
            v = _polar_evolve(
                traj, None, np.exp(weight.alpha * psi_y) * u0, s + delta, t, cfg
            ).values
            vals = ScalarField(v * np.exp(-weight.alpha * psi_s))
        else:
            vals = _polar_evolve(traj, weight, tilt * u0, s + delta, t, cfg)
        out_model = pst.model
    slice_ = KernelSlice(
        out_model, (y, s), t, vals, operator="weighted", weight=weight,
        solver=route, delta=delta,
    )
    slice_.meta["min_value"] = slice_.min_value
    slice_.meta["profile_at_source"] = psi_y
    return slice_


def _profile_at_point(model: ManifoldModel, profile: np.ndarray, y) -> float:
    if model.kind == "flat_torus":
        idx = tuple(
            int(round(float(v) / p * model.resolution)) % model.resolution
            for v, p in zip(np.asarray(y, dtype=float), model.periods)
        )
        return float(profile[idx])
    L = math.pi * model.radius if model.kind == "round_sphere" else model.length
    i = int(round(float(y) / L * model.resolution))
    return float(profile[i])


def evolve_weighted_solution(
    traj: FlowTrajectory,
    weight: Optional[WeightSpec],
    u0: ScalarField,
    t0: float,
    t1: float,
    cfg: Optional[SolverConfig] = None,
    sample_times=None,
):
    """Evolve nonnegative initial data under the weighted heat equation;
    optionally emit snapshots at the requested times."""
    cfg = cfg or SolverConfig()
    if np.any(u0.values < -1e-12):
        raise KernelError("initial data must be nonnegative")
    model = traj.model
    if model.kind == "flat_torus":
        if weight is None or weight.alpha == 0.0:
            if sample_times is None:
                return ScalarField(
                    _torus_heat_apply(
                        model, u0.values, t1 - t0, traj.state_at(t0).data["scale"]
                    )
                )
            samples = [
                (
                    ts,
                    ScalarField(
                        _torus_heat_apply(
                            model, u0.values, ts - t0, traj.state_at(t0).data["scale"]
                        )
                    ),
                )
                for ts in sample_times
            ]
            return samples[-1][1], samples
        if sample_times is None:
            return ScalarField(
                _torus_evolve_weighted(traj, weight, u0.values, t0, t1, cfg)
            )
        samples = []
        u = u0.values
        prev = t0
        for ts in sample_times:
            if ts > prev:
                u = _torus_evolve_weighted(traj, weight, u, prev, ts, cfg)
                prev = ts
            samples.append((ts, ScalarField(u.copy())))
        return samples[-1][1], samples
    return _polar_evolve(
        traj, weight, u0.values, t0, t1, cfg, sample_times=sample_times
    )


# ---------------------------------------------------------------------------
# analytic oracles
# ---------------------------------------------------------------------------

def theta_1d(z: np.ndarray, period: float, tau: float, truncation: float = 1e-12):
    """Periodic heat kernel on a circle of given period at diffusion time tau.

    Gaussian image sum for small tau, Fourier sum for large tau; returns the
    values and a certified bound on the dropped tail.
    """
    if tau <= 0:
        raise KernelError("diffusion time must be positive")
    z = np.remainder(z, period)
    if 4.0 * math.pi * tau < period * period:
        width = math.sqrt(4.0 * tau)
        m_max = int(math.ceil(width * math.sqrt(max(math.log(1 / truncation), 1)) / period)) + 2
        pref = 1.0 / math.sqrt(4.0 * math.pi * tau)
        out = np.zeros_like(z)
        for m in range(-m_max, m_max + 1):
            out += np.exp(-((z + m * period) ** 2) / (4.0 * tau))
        # next image pair is farther than m_max*period from any point
        tail = 2.0 * math.exp(-((m_max - 1) * period) ** 2 / (4.0 * tau)) / (
            1.0 - math.exp(-(period ** 2) / (4.0 * tau))
        )
        return pref * out, pref * tail
    # Fourier representation
    out = np.ones_like(z) / period
    kbase = 2.0 * math.pi / period
    j = 1
    tail = 1.0
    while True:
        term = np.exp(-(kbase * j) ** 2 * tau)
        if term < truncation / period and j > 2:
            ratio = math.exp(-(kbase ** 2) * tau * (2 * j + 1))
            tail = 2.0 * term / period / max(1.0 - ratio, 0.5)
            break
        out += 2.0 * term * np.cos(kbase * j * z) / period
        j += 1
    return out, tail


def oracle_torus_kernel(
    model: ManifoldModel, y, s: float, t: float, truncation: float = 1e-12
) -> KernelSlice:
    """Product of per-axis lattice Gaussian sums on the static flat torus."""
    if t <= s:
        raise KernelError("need t > s")
    tau = t - s
    y = np.asarray(y, dtype=float)
    axes = model.axes()
    vecs = []
    tail_rel = 0.0
    for i in range(model.n):
        v, tail = theta_1d(axes[i] - y[i], model.periods[i], tau, truncation)
        vecs.append(v)
        tail_rel += tail / np.max(v)
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    slice_ = KernelSlice(
        model, (y, s), t, ScalarField(out), solver="oracle", delta=0.0,
        meta={"tail_bound_rel": tail_rel},
    )
    return slice_


def oracle_sphere_kernel(
    traj: FlowTrajectory,
    y,
    s: float,
    t: float,
    max_degree: Optional[int] = None,
    truncation: float = 1e-12,
) -> KernelSlice:
    """Zonal mode sum on the (possibly shrinking) round sphere: each degree-l
    mode decays by exp(-l(l+2) * integral of 1/r^2)."""
    model = traj.model
    if model.kind != "round_sphere":
        raise KernelError("mode-sum oracle needs a round-sphere model")
    if t <= s:
        raise KernelError("need t > s")
    pole = geo._require_pole(model, 0.0 if y is None else y)
    I = traj.inverse_r2_integral(s, t)
    r_s = traj.radius_at(s)
    vol_s = 2.0 * math.pi ** 2 * r_s ** 3
    N = model.resolution
    theta = np.linspace(0.0, math.pi, N + 1)
    if pole != 0:
        theta = theta[::-1].copy()
    out = np.full(N + 1, 1.0 / vol_s)
    l = 1
    lmax = max_degree or 10_000
    tail = 0.0
    while l <= lmax:
        decay = math.exp(-l * (l + 2) * I)
        bound = (l + 1) ** 2 * decay / vol_s
        if bound < truncation / vol_s and l > 3:
            nxt = math.exp(-(2 * l + 3) * I)
            tail = bound * 2.0 / max(1.0 - nxt, 1e-3)
            break
        zl = np.empty(N + 1)
        zl[1:-1] = np.sin((l + 1) * theta[1:-1]) / np.sin(theta[1:-1])
        for end in (0, -1):
            zl[end] = l + 1 if theta[end] < 1.0 else (l + 1) * (-1.0) ** l
        out = out + decay * (l + 1) / vol_s * zl
        l += 1
    if max_degree is not None and l > lmax and tail == 0.0:
        decay = math.exp(-(lmax + 1) * (lmax + 3) * I)
        tail = (lmax + 2) ** 2 * decay / vol_s * 2.0
    return KernelSlice(
        model, (y, s), t, ScalarField(out), solver="oracle", delta=0.0,
        meta={"tail_bound_abs": tail, "modes": l},
    )


# ---------------------------------------------------------------------------
# semigroup (reproducing) check
# ---------------------------------------------------------------------------

def semigroup_residual(
    traj: FlowTrajectory,
    y,
    s: float,
    tau: float,
    t: float,
    cfg: Optional[SolverConfig] = None,
    use_oracle: bool = False,
) -> float:
    """Max residual of H(x,t;y,s) = int H(x,t;z,tau) H(z,tau;y,s) dV_tau(z),
    normalized by max H.

    Composition needs the kernel from interior sources, which is available
    through translation invariance (torus), rotational symmetry (round
    sphere), or spatial symmetry of a static warped metric with x at a pole.
    """
    cfg = cfg or SolverConfig()
    model = traj.model

    def solve(yy, ss, tt):
        if use_oracle:
            if model.kind == "flat_torus":
                return oracle_torus_kernel(model, yy, ss, tt, cfg.truncation)
            return oracle_sphere_kernel(traj, yy, ss, tt, truncation=cfg.truncation)
        return solve_heat_kernel(traj, yy, ss, tt, cfg)

    if model.kind == "flat_torus":
        a = solve(y, s, tau).values.values
        b = solve(np.zeros(model.n), tau, t).values.values
        direct = solve(y, s, t).values.values
        cell = float(geo.volume_measure(traj.state_at(tau)).ravel()[0])
        composed = _fft.irfftn(
            _fft.rfftn(b, workers=-1) * _fft.rfftn(a, workers=-1),
            s=a.shape,
            workers=-1,
        ) * cell
        return float(np.max(np.abs(composed - direct)) / np.max(np.abs(direct)))

    first = solve(y, s, tau)
    direct = solve(y, s, t)
    if model.kind == "round_sphere":
        # round-state weights: trapezoid on sin^2 is exact for mode sums
        wts = geo.volume_measure(traj.state_at(tau))
    else:
        wts = geo.volume_measure(_polar_state(traj, tau))
    resid = 0.0
    ref = float(np.max(np.abs(direct.values.values)))
    L = math.pi * model.radius if model.kind == "round_sphere" else model.length
    for x_pt, idx in ((0.0, 0), (L, -1)):
        second = solve(x_pt, tau, t)
        composed = float(np.sum(second.values.values * first.values.values * wts))
        resid = max(resid, abs(composed - direct.values.values[idx]) / ref)
    return resid
