"""Model closed manifolds, their metrics, and discrete geometric operators.

Three model geometries are supported, chosen because each reduces the PDE
work to exactly solvable or one-dimensional problems:

* ``flat_torus`` -- R^n / (L_1 Z x ... x L_n Z) with a spatially constant
  conformal factor; fields live on a periodic n-d grid and all operators are
  spectral (FFT), hence exact on band-limited data.
* ``round_sphere`` -- S^n of radius r (n = 3 only); rotationally symmetric
  fields live on a polar-angle grid and operators are spectral in the zonal
  harmonic basis sin((l+1)theta)/sin(theta).
* ``warped_sphere`` -- rotationally symmetric metric ds^2 + w(s)^2 g_{S^{n-1}}
  on a fixed coordinate grid; operators are second-order finite differences
  with parity treatment at the poles.

All values are immutable after construction; operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.fft import dst, idst


class GeometryError(ValueError):
    """Invalid model data or unsupported operation for a model kind."""


def unit_sphere_area(m: int) -> float:
    """Surface area of the unit sphere S^m."""
    return 2.0 * math.pi ** ((m + 1) / 2.0) / math.gamma((m + 1) / 2.0)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """Sampled real function aligned with a model's grid.

    representation is "grid" for pointwise samples and "spectral" for
    coefficient vectors (zonal modes on spheres, Fourier modes on tori).
    """

    values: np.ndarray
    representation: str = "grid"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


@dataclass(frozen=True)
class ManifoldModel:
    """Static description of a model geometry and its discretization.

    kind: "flat_torus" | "round_sphere" | "warped_sphere"
    n: manifold dimension (>= 3)
    resolution: points per axis (torus) or intervals on [0, length] (spheres)
    periods: per-axis lengths, torus only
    radius: initial radius, round sphere only
    profile: sampled warping function on the coordinate grid, warped only
    length: coordinate interval for the warped profile
    """

    kind: str
    n: int = 3
    resolution: int = 64
    periods: Optional[tuple] = None
    radius: Optional[float] = None
    profile: Optional[np.ndarray] = None
    length: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("flat_torus", "round_sphere", "warped_sphere"):
            raise GeometryError(f"unknown model kind {self.kind!r}")
        if self.n < 3:
            raise GeometryError("dimension must be at least 3")
        if self.resolution < 8:
            raise GeometryError("resolution too small")
        if self.kind == "flat_torus":
            if self.periods is None or len(self.periods) != self.n:
                raise GeometryError("flat_torus needs one period per axis")
            if any(p <= 0 for p in self.periods):
                raise GeometryError("periods must be positive")
            object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))
        elif self.kind == "round_sphere":
            if self.n != 3:
                raise GeometryError("round_sphere is implemented for n = 3")
            if self.radius is None or self.radius <= 0:
                raise GeometryError("round_sphere needs a positive radius")
        else:
            if self.n != 3:
                raise GeometryError("warped_sphere is implemented for n = 3")
            if self.profile is None or self.length is None:
                raise GeometryError("warped_sphere needs profile samples and a length")
            prof = np.asarray(self.profile, dtype=float)
            if prof.shape != (self.resolution + 1,):
                raise GeometryError("profile must have resolution+1 samples")
            object.__setattr__(self, "profile", prof)
            _check_pole_conditions(prof, self.length / self.resolution)

    @property
    def npoints(self) -> int:
        if self.kind == "flat_torus":
            return self.resolution ** self.n
        return self.resolution + 1

    def axis(self) -> np.ndarray:
        """Coordinate grid: per-axis array (torus) or the polar grid."""
        if self.kind == "flat_torus":
            raise GeometryError("torus has one axis per dimension; use axes()")
        L = math.pi * self.radius if self.kind == "round_sphere" else self.length
        return np.linspace(0.0, L, self.resolution + 1)

    def axes(self) -> list:
        if self.kind != "flat_torus":
            raise GeometryError("axes() is for the torus")
        return [
            p * np.arange(self.resolution) / self.resolution for p in self.periods
        ]


def _check_pole_conditions(w: np.ndarray, h: float, tol: float = 0.05) -> None:
    if abs(w[0]) > 1e-12 or abs(w[-1]) > 1e-12:
        raise GeometryError("warping profile must vanish at both poles")
    if np.any(w[1:-1] <= 0):
        raise GeometryError("warping profile must be positive in the interior")
    # one-sided slopes: w'(0) = 1 and w'(L) = -1 for a smooth closure
    s0 = (-3 * w[0] + 4 * w[1] - w[2]) / (2 * h)
    s1 = (3 * w[-1] - 4 * w[-2] + w[-3]) / (2 * h)
    if abs(s0 - 1.0) > tol or abs(s1 + 1.0) > tol:
        raise GeometryError(
            f"pole slopes must be +-1 (got {s0:.4f}, {s1:.4f}); "
            "profile is not smoothly closed"
        )


@dataclass(frozen=True)
class MetricState:
    """Metric coefficients of a model at one flow time.

    data keys by kind:
      flat_torus    {"scale": c}          g = c^2 * flat
      round_sphere  {"radius": r}
      warped_sphere {"gxx": array, "w": array} on the model's fixed grid
    """

    model: ManifoldModel
    time: float
    data: dict

    def __post_init__(self):
        k = self.model.kind
        if k == "flat_torus":
            if self.data.get("scale", 0.0) <= 0:
                raise GeometryError("conformal scale must be positive")
        elif k == "round_sphere":
            if self.data.get("radius", 0.0) <= 0:
                raise GeometryError("radius must be positive")
        else:
            gxx = np.asarray(self.data["gxx"], dtype=float)
            w = np.asarray(self.data["w"], dtype=float)
            if gxx.shape != w.shape or gxx.shape != (self.model.resolution + 1,):
                raise GeometryError("metric arrays must match the model grid")
            if np.any(gxx <= 0) or np.any(w[1:-1] <= 0):
                raise GeometryError("metric coefficients must be positive")
            object.__setattr__(self, "data", {"gxx": gxx, "w": w})


def initial_state(model: ManifoldModel) -> MetricState:
    if model.kind == "flat_torus":
        return MetricState(model, 0.0, {"scale": 1.0})
    if model.kind == "round_sphere":
        return MetricState(model, 0.0, {"radius": float(model.radius)})
    gxx = np.ones(model.resolution + 1)
    return MetricState(model, 0.0, {"gxx": gxx, "w": model.profile.copy()})


def round_profile(radius: float, resolution: int) -> ManifoldModel:
    """Warped-sphere model whose profile is the round sphere of given radius."""
    L = math.pi * radius
    x = np.linspace(0.0, L, resolution + 1)
    return ManifoldModel(
        kind="warped_sphere",
        n=3,
        resolution=resolution,
        profile=radius * np.sin(x / radius),
        length=L,
    )


# ---------------------------------------------------------------------------
# torus spectral helpers
# ---------------------------------------------------------------------------

def torus_wavenumbers(model: ManifoldModel) -> list:
    return [
        2.0 * math.pi * np.fft.fftfreq(model.resolution, d=p / model.resolution)
        for p in model.periods
    ]


def torus_k2(model: ManifoldModel) -> np.ndarray:
    ks = torus_wavenumbers(model)
    grids = np.meshgrid(*ks, indexing="ij")
    return sum(g * g for g in grids)


# ---------------------------------------------------------------------------
# zonal (rotationally symmetric) spectral helpers for the round 3-sphere
#
# A zonal harmonic of degree l on S^3 restricted to the polar angle is
# sin((l+1) theta) / sin(theta); writing m = l+1 the transform pair is a
# DST-I of f(theta) sin(theta) on the open grid.
# ---------------------------------------------------------------------------

def zonal_analyze(values: np.ndarray) -> np.ndarray:
    """Grid samples on theta_j = j pi / N (N+1 points) -> mode coeffs b_m,
    m = 1..N-1, where f = sum b_m sin(m theta)/sin(theta)."""
    N = values.shape[0] - 1
    theta = np.linspace(0.0, math.pi, N + 1)
    g = values * np.sin(theta)
    return dst(g[1:N], type=1) / N


def zonal_synthesize(coeffs: np.ndarray, npoints: int) -> np.ndarray:
    """Mode coeffs b_m (m = 1..len) -> grid samples on npoints+1 nodes."""
    N = npoints
    b = np.zeros(N - 1)
    b[: len(coeffs)] = coeffs[: N - 1]
    g_int = idst(b * N, type=1)
    theta = np.linspace(0.0, math.pi, N + 1)
    out = np.empty(N + 1)
    out[1:N] = g_int / np.sin(theta[1:N])
    m = np.arange(1, len(b) + 1)
    out[0] = np.sum(b * m)
    out[N] = np.sum(b * m * (-1.0) ** (m + 1))
    return out


def zonal_eigenvalues(nmodes: int) -> np.ndarray:
    """-Laplace eigenvalue on the unit S^3 for modes m = 1..nmodes
    (degree l = m-1, eigenvalue l(l+2) = m^2 - 1)."""
    m = np.arange(1, nmodes + 1, dtype=float)
    return m * m - 1.0


def zonal_theta_derivative(values: np.ndarray) -> np.ndarray:
    """d/dtheta of a zonal grid function, spectrally exact on band-limited data.

    Uses d/dtheta [sin(m t)/sin t] = (m cos(m t) sin t - sin(m t) cos t)/sin^2 t,
    which vanishes at both poles by parity.
    """
    N = values.shape[0] - 1
    b = zonal_analyze(values)
    theta = np.linspace(0.0, math.pi, N + 1)[1:N]
    m = np.arange(1, N)
    st, ct = np.sin(theta), np.cos(theta)
    basis = (
        m[:, None] * np.cos(np.outer(m, theta)) * st[None, :]
        - np.sin(np.outer(m, theta)) * ct[None, :]
    ) / (st * st)[None, :]
    out = np.empty(N + 1)
    out[1:N] = b @ basis
    out[0] = 0.0
    out[N] = 0.0
    return out


# ---------------------------------------------------------------------------
# warped-product finite-difference helpers
# ---------------------------------------------------------------------------

def _extend_parity(f: np.ndarray, even: bool) -> np.ndarray:
    """Two ghost nodes on each side by even/odd reflection at the poles
    (odd reflection assumes f vanishes at the boundary node)."""
    sign = 1.0 if even else -1.0
    return np.concatenate(
        (sign * f[2:0:-1], f, sign * f[-2:-4:-1])
    )


def _d1_fourth(fe: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order first derivative of a parity-extended array."""
    return (-fe[4:] + 8 * fe[3:-1] - 8 * fe[1:-3] + fe[:-4]) / (12 * h)


def _d2_fourth(fe: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order second derivative of a parity-extended array."""
    return (
        -fe[4:] + 16 * fe[3:-1] - 30 * fe[2:-2] + 16 * fe[1:-3] - fe[:-4]
    ) / (12 * h * h)


def _parity_even_derivative(f: np.ndarray, h: float) -> np.ndarray:
    """First derivative of an even-at-both-poles grid function."""
    return _d1_fourth(_extend_parity(f, even=True), h)


def warped_arc_derivatives(state: MetricState):
    """(w_s, w_ss) of the warping function w.r.t. current arc length.

    Fourth-order parity stencils keep the relative error of the singular
    pole ratios (1 - w_s^2)/w^2 and w_ss/w uniformly second order.
    """
    model = state.model
    h = model.length / model.resolution
    gxx = state.data["gxx"]
    w = state.data["w"]
    phi = np.sqrt(gxx)
    we = _extend_parity(w, even=False)
    w_x = _d1_fourth(we, h)
    w_xx = _d2_fourth(we, h)
    phi_x = _parity_even_derivative(phi, h)
    w_s = w_x / phi
    w_ss = w_xx / gxx - w_x * phi_x / (phi ** 3)
    return w_s, w_ss


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def laplace_beltrami(state: MetricState, fld: ScalarField) -> ScalarField:
    """Laplace-Beltrami operator of the state's metric applied to a field.

    Spectral (exact on band-limited data) for torus and round sphere,
    second-order conservative finite differences for warped products.
    """
    model = state.model
    v = fld.values
    if model.kind == "flat_torus":
        if v.shape != (model.resolution,) * model.n:
            raise GeometryError("field shape does not match the torus grid")
        c = state.data["scale"]
        out = np.fft.ifftn(-torus_k2(model) * np.fft.fftn(v)).real / (c * c)
        return ScalarField(out)
    if v.shape != (model.resolution + 1,):
        raise GeometryError("field shape does not match the polar grid")
    if model.kind == "round_sphere":
        r = state.data["radius"]
        b = zonal_analyze(v)
        lam = zonal_eigenvalues(len(b))
        return ScalarField(zonal_synthesize(-lam * b, model.resolution) / (r * r))
    return ScalarField(_warped_laplacian(state, v))


def _half_nodes(f: np.ndarray, even: bool) -> np.ndarray:
    """Cubic interpolation to half nodes using parity ghosts; keeps the
    relative accuracy of quantities vanishing like s^2 at the poles."""
    fe = _extend_parity(f, even)
    mid = (-fe[:-3] + 9 * fe[1:-2] + 9 * fe[2:-1] - fe[3:]) / 16.0
    return mid[1:-1]  # half nodes 1/2 .. N-1/2


def warped_cells(state: MetricState):
    """Finite-volume data on the warped grid: flux coefficients at the N half
    nodes and cell volumes at the N+1 nodes (pole cells are half cells).

    The volume density area * phi * w^(n-1) vanishes like s^(n-1) at the
    poles, so cells are measured with Simpson quadrature rather than rho*h;
    this keeps the operator second-order accurate up to the pole rows.
    """
    model = state.model
    n = model.n
    area = unit_sphere_area(n - 1)
    h = model.length / model.resolution
    gxx = state.data["gxx"]
    w = state.data["w"]
    phi = np.sqrt(gxx)
    w_half = _half_nodes(w, even=False)
    phi_half = _half_nodes(phi, even=True)
    flux_coef = area * w_half ** (n - 1) / phi_half
    dens = area * phi * w ** (n - 1)
    dens_half = area * phi_half * w_half ** (n - 1)
    N = model.resolution
    vol = np.empty(N + 1)
    vol[1:-1] = h / 6.0 * (dens_half[:-1] + 4.0 * dens[1:-1] + dens_half[1:])
    # pole cells [0, h/2]: density ~ c s^(n-1), integral = dens(h/2) (h/2)/n
    vol[0] = dens_half[0] * 0.5 * h / n
    vol[-1] = dens_half[-1] * 0.5 * h / n
    return flux_coef, vol


def warped_operator_coefficients(state: MetricState):
    """Tridiagonal rows of the finite-volume Laplace-Beltrami operator
    (pole rows included; zero flux through the poles by symmetry)."""
    model = state.model
    h = model.length / model.resolution
    flux_coef, vol = warped_cells(state)
    N = model.resolution
    lower = np.zeros(N + 1)
    diag = np.zeros(N + 1)
    upper = np.zeros(N + 1)
    lower[1:] = flux_coef / (h * vol[1:])
    upper[:-1] = flux_coef / (h * vol[:-1])
    diag[1:-1] = -(flux_coef[:-1] + flux_coef[1:]) / (h * vol[1:-1])
    diag[0] = -flux_coef[0] / (h * vol[0])
    diag[-1] = -flux_coef[-1] / (h * vol[-1])
    return lower, diag, upper


def _warped_laplacian(state: MetricState, v: np.ndarray) -> np.ndarray:
    from ._core import tridiag_matvec

    lower, diag, upper = warped_operator_coefficients(state)
    return tridiag_matvec(lower, diag, upper, np.ascontiguousarray(v))


def pole_band_width(N: int) -> int:
    return max(4, int(math.sqrt(N) / 2))


def regularize_pole_band(
    values: np.ndarray, length: float, jb: Optional[int] = None
) -> np.ndarray:
    """Replace near-pole samples of a smooth even-at-the-poles quantity by a
    least-squares linear fit in s^2 from a window of safe interior nodes.

    Curvature-type ratios divide by powers of the warping function, which
    amplifies any metric noise near the poles; their smooth even extensions
    are recovered from the nodes a band away.
    """
    N = values.shape[0] - 1
    if jb is None:
        jb = pole_band_width(N)
    width = max(6, jb)
    out = np.array(values, dtype=float, copy=True)
    s = np.linspace(0.0, length, N + 1)
    t = s * s
    # cosine ramp: fitted values take over smoothly toward the pole, so the
    # replacement introduces no junction kink of its own
    j = np.arange(jb + width + 1)
    ramp = np.where(
        j <= jb, 1.0, 0.5 * (1.0 + np.cos(math.pi * (j - jb) / width))
    )
    cl = np.polyfit(t[jb: jb + width], out[jb: jb + width], 1)
    fit_l = np.polyval(cl, t[: jb + width + 1])
    out[: jb + width + 1] = ramp * fit_l + (1 - ramp) * out[: jb + width + 1]
    tr = (length - s) ** 2
    win = slice(N - jb - width + 1, N - jb + 1)
    cr = np.polyfit(tr[win], out[win], 1)
    fit_r = np.polyval(cr, tr[N - jb - width:])
    out[N - jb - width:] = ramp[::-1] * fit_r + (1 - ramp[::-1]) * out[N - jb - width:]
    return out


def scalar_curvature(state: MetricState) -> ScalarField:
    """Scalar curvature field of the state's metric."""
    model = state.model
    if model.kind == "flat_torus":
        return ScalarField(np.zeros((model.resolution,) * model.n))
    if model.kind == "round_sphere":
        r = state.data["radius"]
        val = model.n * (model.n - 1) / (r * r)
        return ScalarField(np.full(model.resolution + 1, val))
    n = model.n
    w = state.data["w"]
    w_s, w_ss = warped_arc_derivatives(state)
    R = np.empty_like(w)
    interior = slice(1, -1)
    R[interior] = (
        -2 * (n - 1) * w_ss[interior] / w[interior]
        + (n - 1) * (n - 2) * (1.0 - w_s[interior] ** 2) / w[interior] ** 2
    )
    R[0] = 2 * R[1] - R[2]
    R[-1] = 2 * R[-2] - R[-3]
    return ScalarField(regularize_pole_band(R, model.length))


def ricci_eigenvalues(state: MetricState):
    """(radial, orbital) Ricci eigenvalues in an orthonormal frame.

    Radial: -(n-1) w_ss / w; orbital: -w_ss/w + (n-2)(1 - w_s^2)/w^2.
    Constant (n-1)/r^2 pair on the round sphere; zero on the torus.
    """
    model = state.model
    if model.kind == "flat_torus":
        z = np.zeros((model.resolution,) * model.n)
        return z, z.copy()
    if model.kind == "round_sphere":
        r = state.data["radius"]
        val = np.full(model.resolution + 1, (model.n - 1) / (r * r))
        return val, val.copy()
    n = model.n
    w = state.data["w"]
    w_s, w_ss = warped_arc_derivatives(state)
    rad = np.empty_like(w)
    orb = np.empty_like(w)
    interior = slice(1, -1)
    ratio = w_ss[interior] / w[interior]
    rad[interior] = -(n - 1) * ratio
    orb[interior] = -ratio + (n - 2) * (1.0 - w_s[interior] ** 2) / w[interior] ** 2
    for arr in (rad, orb):
        arr[0] = 2 * arr[1] - arr[2]
        arr[-1] = 2 * arr[-2] - arr[-3]
    return (
        regularize_pole_band(rad, model.length),
        regularize_pole_band(orb, model.length),
    )


def volume_measure(state: MetricState) -> np.ndarray:
    """Positive quadrature weights; their sum is the total volume."""
    model = state.model
    if model.kind == "flat_torus":
        c = state.data["scale"]
        cell = np.prod([p / model.resolution for p in model.periods])
        return np.full((model.resolution,) * model.n, c ** model.n * cell)
    area = unit_sphere_area(model.n - 1)
    if model.kind == "round_sphere":
        r = state.data["radius"]
        theta = np.linspace(0.0, math.pi, model.resolution + 1)
        dtheta = math.pi / model.resolution
        wts = area * r ** model.n * np.sin(theta) ** (model.n - 1) * dtheta
        wts[0] *= 0.5
        wts[-1] *= 0.5
        return wts
    # finite-volume cells: matches the Laplacian stencil, so discrete
    # integration by parts holds exactly on warped grids
    _, vol = warped_cells(state)
    return vol


def total_volume(state: MetricState) -> float:
    return float(np.sum(volume_measure(state)))


def integrate(state: MetricState, values: np.ndarray) -> float:
    return float(np.sum(volume_measure(state) * values))


def lp_norm(state: MetricState, values: np.ndarray, p: float) -> float:
    if math.isinf(p):
        return float(np.max(np.abs(values)))
    return float(integrate(state, np.abs(values) ** p) ** (1.0 / p))


def distance(state: MetricState, y, x) -> float:
    """Geodesic distance. On spheres/warped products ``y`` must be a pole
    (0 or the far end); general pairs are supported on the torus only."""
    model = state.model
    if model.kind == "flat_torus":
        c = state.data["scale"]
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        per = np.asarray(model.periods)
        diff = np.remainder(x - y, per)
        diff = np.minimum(diff, per - diff)
        return c * float(np.linalg.norm(diff))
    dfield = distance_field(state, y).values
    idx = _polar_index(model, x)
    return float(dfield[idx])


def _polar_index(model: ManifoldModel, x) -> int:
    axis = model.axis()
    xv = float(x)
    i = int(round(xv / axis[-1] * model.resolution))
    if not (0 <= i <= model.resolution) or abs(axis[i] - xv) > 1e-9 * (1 + axis[-1]):
        raise GeometryError("point must lie on the polar grid")
    return i


def _require_pole(model: ManifoldModel, y) -> int:
    """Return 0 for the near pole, resolution for the far pole."""
    L = math.pi * model.radius if model.kind == "round_sphere" else model.length
    yv = float(y)
    if abs(yv) < 1e-12:
        return 0
    if abs(yv - L) < 1e-9 * (1 + L):
        return model.resolution
    raise GeometryError("source point must be a pole on sphere models")


def distance_field(state: MetricState, y) -> ScalarField:
    """Distance from ``y`` as a field on the grid."""
    model = state.model
    if model.kind == "flat_torus":
        c = state.data["scale"]
        y = np.asarray(y, dtype=float)
        axes = model.axes()
        per = np.asarray(model.periods)
        diffs = []
        for i, ax in enumerate(axes):
            d = np.remainder(ax - y[i], per[i])
            diffs.append(np.minimum(d, per[i] - d))
        grids = np.meshgrid(*diffs, indexing="ij")
        return ScalarField(c * np.sqrt(sum(g * g for g in grids)))
    pole = _require_pole(model, y)
    if model.kind == "round_sphere":
        r = state.data["radius"]
        theta = np.linspace(0.0, math.pi, model.resolution + 1)
        vals = r * theta if pole == 0 else r * (math.pi - theta)
        return ScalarField(vals)
    h = model.length / model.resolution
    phi = np.sqrt(state.data["gxx"])
    arc = np.concatenate(([0.0], np.cumsum(0.5 * (phi[1:] + phi[:-1]) * h)))
    if pole != 0:
        arc = arc[-1] - arc
    return ScalarField(arc)


def cross_metric_gradient_norm(
    source_state: MetricState, dfield: ScalarField, target_state: MetricState
) -> ScalarField:
    """|grad d|_{g(lambda)} for a distance field d of g(t0), measured in the
    metric of ``target_state``.

    Distance fields have unit gradient in their own metric, so the norm is
    the pointwise metric-stretch ratio between the two states.
    """
    model = source_state.model
    if model is not target_state.model and model != target_state.model:
        raise GeometryError("states must share a model")
    if model.kind == "flat_torus":
        ratio = source_state.data["scale"] / target_state.data["scale"]
        return ScalarField(np.full_like(dfield.values, ratio))
    if model.kind == "round_sphere":
        ratio = source_state.data["radius"] / target_state.data["radius"]
        return ScalarField(np.full_like(dfield.values, ratio))
    ratio = np.sqrt(source_state.data["gxx"] / target_state.data["gxx"])
    return ScalarField(ratio)


def gradient_norm_sq(state: MetricState, fld: ScalarField) -> ScalarField:
    """|grad f|^2 under the state's metric."""
    model = state.model
    v = fld.values
    if model.kind == "flat_torus":
        c = state.data["scale"]
        F = np.fft.fftn(v)
        ks = torus_wavenumbers(model)
        total = np.zeros_like(v)
        for axis_idx in range(model.n):
            shape = [1] * model.n
            shape[axis_idx] = model.resolution
            k = ks[axis_idx].reshape(shape)
            df = np.fft.ifftn(1j * k * F).real
            total += df * df
        return ScalarField(total / (c * c))
    if model.kind == "round_sphere":
        r = state.data["radius"]
        dth = zonal_theta_derivative(v)
        return ScalarField((dth / r) ** 2)
    h = model.length / model.resolution
    df = _parity_even_derivative(v, h)
    return ScalarField(df * df / state.data["gxx"])


def pole_band_mask(model: ManifoldModel, cells: int = 2) -> np.ndarray:
    """True where a point is at least ``cells`` grid cells away from the
    poles / cut locus (the set excluded from gradient suprema)."""
    if model.kind == "flat_torus":
        # cut locus of a torus point: half-period faces; gradients of the
        # wrapped distance are unreliable within a band around them
        mask = np.ones((model.resolution,) * model.n, dtype=bool)
        return mask
    mask = np.zeros(model.resolution + 1, dtype=bool)
    mask[cells: model.resolution + 1 - cells] = True
    return mask


# ---------------------------------------------------------------------------
# random smooth fields (shared by the property-test suites)
# ---------------------------------------------------------------------------

def random_smooth_field(
    model: ManifoldModel,
    rng: np.random.Generator,
    amplitude: float = 0.8,
    max_mode: int = 3,
    positive: bool = True,
) -> ScalarField:
    """Band-limited random field; exp of it when ``positive`` is requested."""
    if model.kind == "flat_torus":
        N = model.resolution
        coef = np.zeros((N,) * model.n, dtype=complex)
        idx_range = range(-max_mode, max_mode + 1)
        for ijk in np.ndindex(*(2 * max_mode + 1,) * model.n):
            m = tuple(idx_range[i] for i in ijk)
            if all(v == 0 for v in m):
                continue
            coef[tuple(v % N for v in m)] = rng.normal() + 1j * rng.normal()
        q = np.fft.ifftn(coef).real
        q *= amplitude / max(np.std(q), 1e-30)
    else:
        N = model.resolution
        nmodes = min(max_mode * 2, N - 1)
        b = rng.normal(size=nmodes) / (1.0 + np.arange(nmodes)) ** 2
        q = zonal_synthesize(b, N)
        q *= amplitude / max(np.std(q), 1e-30)
    q -= np.mean(q)
    return ScalarField(np.exp(q) if positive else q)
