# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""Forward solver of the kinetic Fokker-Planck / continuity equation

    m_t + v D_x m - div_v(D_v u m) = sigma Lap m,    m(0) = m0,

with a conservative, positivity preserving finite volume scheme (first-order
upwind by default, a minmod limited variant on request), plus the
Wasserstein-1 tools used to measure distances between density slices.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import ot
from scipy import stats

from .exceptions import BoundaryLeakage, CFLViolation, ClampCorrectionError, DensityValueError, NonFiniteValue
from .model import FieldPath, InitialDensity, cfl_dt

_logger = logging.getLogger(__name__)

CLAMP_TOLERANCE = 1e-8
LEAKAGE_TOLERANCE = 1e-6
D1_DIRECTIONS = tuple(np.pi / 4 * k for k in range(8))
TRANSPORT_SCHEMES = ("upwind", "muscl")


@dataclass(frozen=True, eq=False)
class DensityPath:
    """Density slices with their mass and second moment traces."""

    m: FieldPath
    sigma: float
    mass: np.ndarray
    second_moment: np.ndarray
    min_value: float
    clamp_correction: float = 0.0
    leakage: float = 0.0

    @property
    def grid(self):
        return self.m.grid

    @property
    def time(self):
        return self.m.time

    @property
    def k_run(self):
        """sup of the density over the run."""
        return float(np.max(self.m.values))

    def __getitem__(self, index):
        return self.m[index]


def _minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _face_states(m, scheme):
    """Upwind candidates at the interior faces along the first axis."""
    if scheme == "upwind":
        return m[:-1], m[1:]
    diff = np.diff(m, axis=0)
    slopes = np.zeros_like(m)
    slopes[1:-1] = _minmod(diff[:-1], diff[1:])
    return m[:-1] + 0.5 * slopes[:-1], m[1:] - 0.5 * slopes[1:]


def _advect(m, speed, dt, h, scheme="upwind"):
    # speed holds the face velocities, shape (n - 1, k)
    left, right = _face_states(m, scheme)
    flux = np.zeros((m.shape[0] + 1, m.shape[1]))
    flux[1:-1] = np.maximum(speed, 0.0) * left + np.minimum(speed, 0.0) * right
    return m - dt / h * (flux[1:] - flux[:-1])


def _advect_x(m, V, dt, dx, scheme="upwind"):
    return _advect(m, V[:-1], dt, dx, scheme)


def _advect_v(m, drift_faces, dt, dv, scheme="upwind"):
    return _advect(m.T, drift_faces.T, dt, dv, scheme).T


def _transport_step(m, V, drift_faces, dt, dx, dv, scheme):
    if scheme == "upwind":
        return _advect_v(_advect_x(m, V, dt, dx), drift_faces, dt, dv)
    # the limited update needs two half steps per direction to stay positive
    for _ in range(2):
        m = _advect_x(m, V, 0.5 * dt, dx, scheme)
    for _ in range(2):
        m = _advect_v(m, drift_faces, 0.5 * dt, dv, scheme)
    return m


def _diffuse(m, sigma, dt, dx, dv):
    flux_x = np.zeros((m.shape[0] + 1, m.shape[1]))
    flux_x[1:-1] = -sigma * (m[1:] - m[:-1]) / dx
    flux_v = np.zeros((m.shape[0], m.shape[1] + 1))
    flux_v[:, 1:-1] = -sigma * (m[:, 1:] - m[:, :-1]) / dv
    return m - dt * ((flux_x[1:] - flux_x[:-1]) / dx + (flux_v[:, 1:] - flux_v[:, :-1]) / dv)


def _leakage_side(m):
    sides = {
        "x_min": m[0, :],
        "x_max": m[-1, :],
        "v_min": m[:, 0],
        "v_max": m[:, -1],
    }
    return max(sides, key=lambda k: float(np.sum(sides[k])))


def solve_transport_forward(m0, dvu, sigma, check_leakage=True, scheme="upwind"):
    """Push m0 forward with the drift -D_v u taken from `dvu`.

    `m0` is an InitialDensity (discretized on the grid of `dvu`) or a
    ScalarField, which is then used as is (restart from a slice).

    The default `scheme` is the first-order upwind flux, one full step per
    direction. "muscl" swaps in minmod-limited face states.
    """
    grid, time = dvu.grid, dvu.time
    if sigma < 0:
        raise ValueError("sigma must be nonnegative.")
    if scheme not in TRANSPORT_SCHEMES:
        raise ValueError(f"Unknown transport scheme '{scheme}', expected one of {TRANSPORT_SCHEMES}.")
    if isinstance(m0, InitialDensity):
        if not m0.support_inside(grid, inner=True):
            _logger.warning("Support of m0 %s exceeds the inner half-box.", m0.support_box())
        m0 = m0.on_grid(grid)
    if m0.grid != grid:
        raise ValueError("m0 and the drift are not defined on the same grid.")
    X, V = grid.mesh
    r2 = X**2 + V**2
    area = grid.cell_area
    dt, dx, dv = time.dt, grid.dx, grid.dv
    values = np.empty((time.nt + 1,) + grid.shape)
    values[0] = m0.values
    mass = np.empty(time.nt + 1)
    second = np.empty(time.nt + 1)
    mass[0] = np.sum(values[0]) * area
    second[0] = np.sum(r2 * values[0]) * area
    min_value = float(np.min(values[0]))
    correction = 0.0
    leakage = float(np.sum(values[0][grid.boundary_mask]) * area)
    for n in range(time.nt):
        b = dvu.values[n]
        dt_max = cfl_dt(grid, float(np.max(np.abs(b))), sigma)
        if dt > dt_max:
            raise CFLViolation("transport", n, dt, dt_max)
        drift_faces = -0.5 * (b[:, 1:] + b[:, :-1])
        m = _transport_step(values[n], V, drift_faces, dt, dx, dv, scheme)
        if sigma > 0:
            m = _diffuse(m, sigma, dt, dx, dv)
        if not np.all(np.isfinite(m)):
            raise NonFiniteValue("transport", n + 1)
        slice_min = float(np.min(m))
        min_value = min(min_value, slice_min)
        if slice_min < 0:
            before = np.sum(m)
            negative = -np.sum(m[m < 0]) * area
            m = np.maximum(m, 0.0)
            m *= before / np.sum(m)
            correction += negative
            _logger.debug("transport slice %s: clamped %.3e of negative mass", n + 1, negative)
            if correction > CLAMP_TOLERANCE:
                raise ClampCorrectionError(
                    f"transport: cumulated clamp correction {correction:.3e} exceeds {CLAMP_TOLERANCE:g}"
                )
        ring = float(np.sum(m[grid.boundary_mask]) * area)
        leakage = max(leakage, ring)
        if check_leakage and ring > LEAKAGE_TOLERANCE:
            raise BoundaryLeakage(
                f"transport: mass {ring:.3e} reached the {_leakage_side(m)} "
                f"boundary at t={time.t[n + 1]:.4g} (truncation box too tight)"
            )
        values[n + 1] = m
        mass[n + 1] = np.sum(m) * area
        second[n + 1] = np.sum(r2 * m) * area
        _logger.debug("transport slice %s: mass=%.12f", n + 1, mass[n + 1])
    return DensityPath(
        m=FieldPath(time, grid, values),
        sigma=sigma,
        mass=mass,
        second_moment=second,
        min_value=min_value,
        clamp_correction=correction,
        leakage=leakage,
    )


def _check_pair(m1, m2, tol=1e-6):
    if m1.grid != m2.grid:
        raise ValueError("Densities must share one grid.")
    mass1, mass2 = m1.mass(), m2.mass()
    if abs(mass1 - mass2) > tol:
        raise DensityValueError(f"Mass mismatch {abs(mass1 - mass2):.3e} between densities.")


def d1_estimate(m1, m2):
    """Sliced Wasserstein-1 distance averaged over 8 fixed directions.

    It is a lower bound of the exact d1 and equals |delta| (1 + sqrt 2) / 4
    for a translation by delta along an axis.
    """
    _check_pair(m1, m2)
    X, V = m1.grid.mesh
    w1 = np.maximum(m1.values, 0.0).ravel()
    w2 = np.maximum(m2.values, 0.0).ravel()
    distances = []
    for angle in D1_DIRECTIONS:
        proj = (np.cos(angle) * X + np.sin(angle) * V).ravel()
        distances.append(stats.wasserstein_distance(proj, proj, w1, w2))
    return float(np.mean(distances))


def _bins(grid, size):
    """Bin index of every node and the node centroid of every bin."""
    ix = np.minimum((np.arange(grid.nx) * size) // grid.nx, size - 1)
    iv = np.minimum((np.arange(grid.nv) * size) // grid.nv, size - 1)
    index = (ix[:, None], iv[None, :])
    X, V = grid.mesh
    counts = np.zeros((size, size))
    np.add.at(counts, index, 1.0)
    sx = np.zeros((size, size))
    sv = np.zeros((size, size))
    np.add.at(sx, index, X)
    np.add.at(sv, index, V)
    return index, np.stack([sx / counts, sv / counts], axis=-1)


def _coarsen(m, size):
    index, centroids = _bins(m.grid, size)
    weights = np.zeros((size, size))
    np.add.at(weights, index, np.maximum(m.values, 0.0))
    return centroids.reshape(-1, 2), weights.ravel() / weights.sum()


def binning_radius(grid, size=32):
    """Largest distance between a node and the centroid of its bin."""
    size = min(size, grid.nx, grid.nv)
    index, centroids = _bins(grid, size)
    X, V = grid.mesh
    nodes = centroids[index]
    return float(np.max(np.hypot(X - nodes[..., 0], V - nodes[..., 1])))


def exact_d1(m1, m2, size=32):
    """Exact Wasserstein-1 distance after binning both densities on size x size cells."""
    _check_pair(m1, m2)
    size = min(size, m1.grid.nx, m1.grid.nv)
    coords, a = _coarsen(m1, size)
    _, b = _coarsen(m2, size)
    cost = ot.dist(coords, coords, metric="euclidean")
    return float(ot.emd2(a, b, cost))


@dataclass
class D1CrossCheck:
    """Largest sliced estimate and exact binned d1 over pairs of slices.

    Binning moves each node by at most `binning_radius`, so the exact value
    of the binned densities is within twice that radius of the true d1,
    which bounds the sliced estimate from above.
    """

    estimate: float
    exact: float
    tolerance: float

    @property
    def consistent(self):
        return self.estimate <= self.exact + self.tolerance


def d1_cross_check(pairs, size=32):
    pairs = list(pairs)
    if not pairs:
        raise ValueError("At least one pair of densities is required.")
    return D1CrossCheck(
        estimate=max(d1_estimate(a, b) for a, b in pairs),
        exact=max(exact_d1(a, b, size) for a, b in pairs),
        tolerance=2 * binning_radius(pairs[0][0].grid, size),
    )


@dataclass
class MomentReport:
    max_second_moment: float
    k_constant: float
    trace: np.ndarray = field(repr=False)


def moment_report(path):
    """sup_t M2(t), normalized by 1 + M2(0)."""
    trace = np.asarray(path.second_moment)
    sup = float(np.max(trace))
    return MomentReport(max_second_moment=sup, k_constant=sup / (1.0 + trace[0]), trace=trace)


@dataclass
class HolderReport:
    pairs: list
    max_ratio: float


def time_holder_report(path, levels=4):
    """Ratios d1(m(t1), m(t2)) / |t1 - t2|^(1/2) over dyadic pairs of slices."""
    time = path.time
    pairs = []
    for level in range(levels):
        count = 2**level
        if count > time.nt:
            break
        nodes = np.rint(np.linspace(0, time.nt, count + 1)).astype(int)
        for n1, n2 in zip(nodes[:-1], nodes[1:]):
            gap = time.t[n2] - time.t[n1]
            ratio = d1_estimate(path.m[n1], path.m[n2]) / np.sqrt(gap)
            pairs.append((int(n1), int(n2), float(ratio)))
    return HolderReport(pairs=pairs, max_ratio=max(p[2] for p in pairs))


def first_moments(m):
    """Return the mean (x, v) of a density slice."""
    return m.integrate(lambda X, V: X), m.integrate(lambda X, V: V)


def variance_v(m):
    mean_v = m.integrate(lambda X, V: V)
    return m.integrate(lambda X, V: (V - mean_v) ** 2)


def positivity_report(path):
    """Index of the first slice after which every interior node stays positive."""
    interior = path.m.values[:, 1:-1, 1:-1]
    positive = np.all(interior > 0, axis=(1, 2))
    for n in range(len(positive)):
        if positive[n:].all():
            return n
    return None

