# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""Weighted particle representation of the density path.

Particles are drawn from m0 by deterministic stratification, then moved
along the closed-loop dynamics x' = v, v' = -D_v u(x, v, t).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .exceptions import ParticleExit
from .model import InitialDensity

_logger = logging.getLogger(__name__)

MIN_PARTICLES = 100
MIN_ACTIVE_CELLS = 100


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    x: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        for name in ("x", "v", "w"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not self.x.shape == self.v.shape == self.w.shape:
            raise ValueError("x, v and w must have the same length.")
        if np.any(self.w < 0):
            raise ValueError("Particle weights must be nonnegative.")
        if abs(self.w.sum() - 1.0) > 1e-12:
            raise ValueError(f"Particle weights sum to {self.w.sum():.15g} instead of 1.")

    def __len__(self):
        return self.x.size

    def expectation(self, func):
        return float(np.sum(self.w * func(self.x, self.v)))


@dataclass(frozen=True, eq=False)
class ParticleTrajectories:
    """Positions of every particle on every slice, shape (nt + 1, n)."""

    time: object
    x: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def at(self, index):
        return ParticleEnsemble(self.x[index], self.v[index], self.w)

    def expectation(self, func, index):
        return float(np.sum(self.w * func(self.x[index], self.v[index])))


def sample_from_density(m0, n, grid=None, threshold=0.0):
    """Stratified sample of `n` weighted particles from m0.

    Each cell with m0 > threshold is split in r x r sub-cells, r the
    smallest integer with r^2 * active_cells >= n; one particle sits at
    each sub-cell center with weight m0(cell) * area / r^2.
    """
    if n < MIN_PARTICLES:
        raise ValueError(f"At least {MIN_PARTICLES} particles are required, got {n}.")
    if isinstance(m0, InitialDensity):
        if grid is None:
            raise ValueError("A grid is required to sample an InitialDensity.")
        m0 = m0.on_grid(grid)
    grid = m0.grid
    active = np.argwhere(m0.values > threshold)
    if len(active) < MIN_ACTIVE_CELLS:
        raise ValueError(
            f"Only {len(active)} cells carry mass (minimum {MIN_ACTIVE_CELLS}): degenerate m0."
        )
    r = int(math.ceil(math.sqrt(n / len(active))))
    offsets = (np.arange(r) + 0.5) / r - 0.5
    ox, ov = np.meshgrid(offsets * grid.dx, offsets * grid.dv, indexing="ij")
    ox, ov = ox.ravel(), ov.ravel()
    cx = grid.x[active[:, 0]]
    cv = grid.v[active[:, 1]]
    x = (cx[:, None] + ox[None, :]).ravel()
    v = (cv[:, None] + ov[None, :]).ravel()
    weights = m0.values[active[:, 0], active[:, 1]] * grid.cell_area / r**2
    w = np.repeat(weights, r * r)
    w = w / w.sum()
    _logger.debug("sampled %s particles from %s active cells (%sx%s sub-cells)", x.size, len(active), r, r)
    return ParticleEnsemble(x, v, w)


def advect(ensemble, dvu):
    """Move the particles with RK4 on the time grid of `dvu`.

    The drift is interpolated trilinearly in (t, x, v). A particle leaving
    the grid box raises ParticleExit.
    """
    grid, time = dvu.grid, dvu.time
    interpolator = RegularGridInterpolator(
        (time.t, grid.x, grid.v), dvu.values, bounds_error=False, fill_value=None
    )
    count = len(ensemble)

    def drift(t, x, v):
        points = np.column_stack([np.full(count, t), x, v])
        return -interpolator(points)

    def check(x, v, t):
        outside = ~grid.contains(x, v)
        if np.any(outside):
            raise ParticleExit(int(np.argmax(outside)), t)

    x = np.empty((time.nt + 1, count))
    v = np.empty((time.nt + 1, count))
    x[0], v[0] = ensemble.x, ensemble.v
    check(x[0], v[0], time.t[0])
    h = time.dt
    for n in range(time.nt):
        t, xn, vn = time.t[n], x[n], v[n]
        k1x, k1v = vn, drift(t, xn, vn)
        k2x, k2v = vn + 0.5 * h * k1v, drift(t + 0.5 * h, xn + 0.5 * h * k1x, vn + 0.5 * h * k1v)
        k3x, k3v = vn + 0.5 * h * k2v, drift(t + 0.5 * h, xn + 0.5 * h * k2x, vn + 0.5 * h * k2v)
        k4x, k4v = vn + h * k3v, drift(t + h, xn + h * k3x, vn + h * k3v)
        x[n + 1] = xn + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v[n + 1] = vn + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        check(x[n + 1], v[n + 1], time.t[n + 1])
    return ParticleTrajectories(time=time, x=x, v=v, w=ensemble.w)


def default_test_functions():
    """Monomials up to second order plus three Gaussian bumps."""

    def bump(cx, cv, width=0.5):
        return lambda x, v: np.exp(-((x - cx) ** 2 + (v - cv) ** 2) / (2 * width**2))

    return {
        "1": lambda x, v: np.ones_like(x),
        "x": lambda x, v: x,
        "v": lambda x, v: v,
        "x2": lambda x, v: x**2,
        "v2": lambda x, v: v**2,
        "xv": lambda x, v: x * v,
        "bump_center": bump(0.0, 0.0),
        "bump_right": bump(0.5, 0.25),
        "bump_left": bump(-0.5, -0.25),
    }


SECOND_ORDER = ("x2", "v2", "xv")


@dataclass
class RepresentationReport:
    rows: list

    def max_abs(self, name=None):
        rows = [r for r in self.rows if name is None or r["name"] == name]
        return max(r["abs_diff"] for r in rows)

    def max_rel(self, names=SECOND_ORDER):
        rows = [r for r in self.rows if r["name"] in names]
        return max(r["rel_diff"] for r in rows)


def representation_check(trajectories, path, test_functions=None, checkpoints=None):
    """Compare grid integrals of phi against m(t) with particle averages."""
    test_functions = test_functions or default_test_functions()
    time = path.time
    checkpoints = checkpoints if checkpoints is not None else time.checkpoints(5)
    X, V = path.grid.mesh
    rows = []
    for n in checkpoints:
        m = path.m[n] if hasattr(path, "m") else path[n]
        for name, func in test_functions.items():
            grid_value = path.grid.integrate(func(X, V) * m.values)
            particle_value = trajectories.expectation(func, n)
            diff = abs(grid_value - particle_value)
            rows.append(
                {
                    "name": name,
                    "t": float(time.t[n]),
                    "grid": grid_value,
                    "particles": particle_value,
                    "abs_diff": diff,
                    "rel_diff": diff / max(abs(grid_value), 1e-12),
                }
            )
    return RepresentationReport(rows=rows)
