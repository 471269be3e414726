# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""Pontryagin shooting for the deterministic (sigma = 0) control problem.

Optimality system, with the acceleration alpha = p_v:

    x' = v,         v' = p_v,
    p_x' = D_x ell, p_v' = -p_x + v + D_v ell,
    p(T) = -D g(x(T), v(T)).

The unknown initial costate is found by a damped Newton iteration on the
terminal condition (single shooting), or on the terminal condition plus
the matching conditions at interior nodes (multiple shooting).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .exceptions import TrajectoryDivergence

_logger = logging.getLogger(__name__)

MAX_NEWTON_ITERATIONS = 50
MAX_BACKTRACKS = 12


class CostSampler:
    """Smooth off-grid evaluation of ell, its gradient and D g.

    Gradients are finite differences of the grid values, then interpolated
    by bicubic splines on each slice and linearly in time.
    """

    def __init__(self, cost):
        self.cost = cost
        self.grid = cost.grid
        self.time = cost.time
        self._slices = {}
        self._stationary = bool(np.all(cost.ell.values == cost.ell.values[0]))
        self._terminal = self._fit(cost.g.values)

    def _fit(self, values):
        grid = self.grid
        d_x = np.gradient(values, grid.dx, axis=0)
        d_v = np.gradient(values, grid.dv, axis=1)
        return tuple(RectBivariateSpline(grid.x, grid.v, a, kx=3, ky=3) for a in (values, d_x, d_v))

    def _slice(self, n):
        splines = self._slices.get(n)
        if splines is None:
            splines = self._slices[n] = self._fit(self.cost.ell.values[n])
        return splines

    def _clip(self, x, v):
        grid = self.grid
        return np.clip(x, grid.x_min, grid.x_max), np.clip(v, grid.v_min, grid.v_max)

    def ell(self, x, v, s):
        """Return (ell, D_x ell, D_v ell) at time s."""
        time = self.time
        x, v = self._clip(x, v)
        if self._stationary:
            return [sp.ev(x, v) for sp in self._slice(0)]
        pos = (s - time.start) / time.dt
        n = min(max(int(math.floor(pos)), 0), time.nt - 1)
        w = min(max(pos - n, 0.0), 1.0)
        lower = [sp.ev(x, v) for sp in self._slice(n)]
        if w == 0.0:
            return lower
        upper = [sp.ev(x, v) for sp in self._slice(n + 1)]
        return [(1 - w) * a + w * b for a, b in zip(lower, upper)]

    def terminal(self, x, v):
        """Return (g, D_x g, D_v g)."""
        x, v = self._clip(x, v)
        return [sp.ev(x, v) for sp in self._terminal]


def _rhs(sampler, s, y):
    x, v, px, pv = y[0], y[1], y[2], y[3]
    ell, ell_x, ell_v = sampler.ell(x, v, s)
    return np.stack([v, pv, ell_x, -px + v + ell_v, 0.5 * pv**2 + 0.5 * v**2 + ell])


def _integrate(sampler, y0, s0, steps, h):
    """Classical RK4 on the augmented state (x, v, p_x, p_v, J).

    y0 has shape (5, K); return the states at every step, shape (steps + 1, 5, K).
    """
    states = np.empty((steps + 1,) + y0.shape)
    states[0] = y = y0
    s = s0
    for k in range(steps):
        k1 = _rhs(sampler, s, y)
        k2 = _rhs(sampler, s + 0.5 * h, y + 0.5 * h * k1)
        k3 = _rhs(sampler, s + 0.5 * h, y + 0.5 * h * k2)
        k4 = _rhs(sampler, s + h, y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        s = s0 + (k + 1) * h
        states[k + 1] = y
    return states


@dataclass(frozen=True, eq=False)
class PMPTrajectory:
    """Solution of the optimality system started from (x0, v0) at t0."""

    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    p_x: np.ndarray
    p_v: np.ndarray
    running_cost: np.ndarray = field(repr=False)
    terminal_cost: float
    residual: np.ndarray
    converged: bool
    iterations: int
    segments: int = 1

    @property
    def alpha(self):
        return self.p_v

    @property
    def cost(self):
        return float(self.running_cost[-1] + self.terminal_cost)

    @property
    def residual_norm(self):
        return float(np.linalg.norm(self.residual))

    @property
    def start(self):
        return float(self.x[0]), float(self.v[0]), float(self.s[0])

    def cost_to_go(self, index):
        """Cost of the tail of the trajectory from sample `index`."""
        return float(self.running_cost[-1] - self.running_cost[index] + self.terminal_cost)

    def to_rows(self):
        return np.column_stack([self.s, self.x, self.v, self.p_x, self.p_v, self.alpha])


class _Shooting:
    """Residual map of the (multiple) shooting problem.

    The unknown z holds p(t0), then (x, v, p_x, p_v) at each interior node.
    """

    def __init__(self, sampler, x0, v0, t0, segments, step):
        time = sampler.time
        self.sampler = sampler
        self.x0, self.v0, self.t0 = x0, v0, t0
        total = max(segments, int(math.ceil((time.horizon - t0) / step - 1e-9)))
        self.h = (time.horizon - t0) / total
        bounds = np.rint(np.linspace(0, total, segments + 1)).astype(int)
        self.segment_steps = np.diff(bounds)
        self.segment_starts = t0 + bounds[:-1] * self.h
        self.segments = segments
        grid = sampler.grid
        xc, vc = 0.5 * (grid.x_min + grid.x_max), 0.5 * (grid.v_min + grid.v_max)
        self._limits = (xc, grid.x_max - grid.x_min, vc, grid.v_max - grid.v_min)

    @property
    def size(self):
        return 2 + 4 * (self.segments - 1)

    def diverged(self, states):
        xc, wx, vc, wv = self._limits
        x, v = states[:, 0], states[:, 1]
        bad = ~np.all(np.isfinite(states), axis=(0, 1))
        return bad | np.any(np.abs(x - xc) > wx, axis=0) | np.any(np.abs(v - vc) > wv, axis=0)

    def _start(self, z, k):
        count = z.shape[1]
        if k == 0:
            head = np.stack([np.full(count, self.x0), np.full(count, self.v0), z[0], z[1]])
        else:
            head = z[2 + 4 * (k - 1) : 2 + 4 * k]
        return np.vstack([head, np.zeros((1, count))])

    def run(self, z):
        """Integrate every segment for each column of z."""
        return [
            _integrate(self.sampler, self._start(z, k), self.segment_starts[k], int(steps), self.h)
            for k, steps in enumerate(self.segment_steps)
        ]

    def residual(self, z):
        paths = self.run(z)
        parts = []
        for k in range(self.segments - 1):
            parts.append(paths[k][-1, :4] - z[2 + 4 * k : 6 + 4 * k])
        end = paths[-1][-1]
        _, gx, gv = self.sampler.terminal(end[0], end[1])
        parts.append(np.stack([end[2] + gx, end[3] + gv]))
        diverged = np.zeros(z.shape[1], dtype=bool)
        for path in paths:
            diverged |= self.diverged(path)
        return np.vstack(parts), diverged

    def initial(self, p0):
        """Unknowns from one plain integration with p(t0) = p0."""
        z = np.zeros((self.size, 1))
        z[:2, 0] = p0
        for k in range(self.segments - 1):
            steps = int(self.segment_steps[k])
            path = _integrate(self.sampler, self._start(z, k), self.segment_starts[k], steps, self.h)
            z[2 + 4 * k : 6 + 4 * k, 0] = path[-1, :4, 0]
        return z[:, 0]


def shoot(
    cost,
    x0,
    v0,
    t0=0.0,
    initial_costate=None,
    sol=None,
    tol=1e-9,
    segments=1,
    max_iters=MAX_NEWTON_ITERATIONS,
):
    """Solve the optimality system from (x0, v0, t0) by damped Newton shooting.

    The initial costate defaults to -D u(x0, v0, t0) when the value
    solution `sol` is given, to zero otherwise. A run that does not meet
    `tol` within `max_iters` iterations comes back with converged=False.
    """
    time = cost.time
    if not time.start <= t0 < time.horizon:
        raise ValueError(f"t0={t0} must lie in [{time.start}, {time.horizon}).")
    if segments < 1:
        raise ValueError("segments must be a positive integer.")
    sampler = cost if isinstance(cost, CostSampler) else CostSampler(cost)
    if initial_costate is None:
        if sol is not None:
            initial_costate = (
                -float(sol.interpolate("dxu", x0, v0, t0)),
                -float(sol.interpolate("dvu", x0, v0, t0)),
            )
        else:
            initial_costate = (0.0, 0.0)
    problem = _Shooting(sampler, x0, v0, t0, segments, 0.5 * time.dt)
    z = problem.initial(np.asarray(initial_costate, dtype=float))
    r, diverged = problem.residual(z[:, None])
    if diverged[0]:
        raise TrajectoryDivergence(
            f"pmp: trajectory from ({x0:.4g}, {v0:.4g}) left twice the grid box"
        )
    r = r[:, 0]
    norm = np.linalg.norm(r)
    iterations = 0
    while norm > tol and iterations < max_iters:
        iterations += 1
        eps = 1e-7 * (1.0 + np.abs(z))
        columns = np.tile(z[:, None], (1, z.size))
        columns[np.arange(z.size), np.arange(z.size)] += eps
        perturbed, _ = problem.residual(columns)
        jacobian = (perturbed - r[:, None]) / eps[None, :]
        delta = np.linalg.lstsq(jacobian, -r, rcond=None)[0]
        step = 1.0
        for _ in range(MAX_BACKTRACKS):
            trial = z + step * delta
            r_trial, bad = problem.residual(trial[:, None])
            norm_trial = np.linalg.norm(r_trial[:, 0])
            if not bad[0] and norm_trial < norm:
                z, r, norm = trial, r_trial[:, 0], norm_trial
                break
            step *= 0.5
        else:
            _logger.warning("pmp: line search failed at iteration %s (residual %.3e)", iterations, norm)
            break
        _logger.debug("pmp newton %s: residual %.3e (step %.3g)", iterations, norm, step)
    converged = bool(norm <= tol)
    if not converged:
        _logger.warning(
            "pmp: shooting from (%.4g, %.4g) stopped at residual %.3e after %s iterations",
            x0,
            v0,
            norm,
            iterations,
        )
    paths = problem.run(z[:, None])
    states = [paths[0][:, :, 0]]
    offset = paths[0][-1, 4, 0]
    for path in paths[1:]:
        seg = path[1:, :, 0].copy()
        seg[:, 4] += offset
        offset = seg[-1, 4]
        states.append(seg)
    states = np.vstack(states)
    s = t0 + problem.h * np.arange(states.shape[0])
    s[-1] = time.horizon
    g, _, _ = sampler.terminal(states[-1, 0], states[-1, 1])
    return PMPTrajectory(
        s=s,
        x=states[:, 0],
        v=states[:, 1],
        p_x=states[:, 2],
        p_v=states[:, 3],
        running_cost=states[:, 4],
        terminal_cost=float(g),
        residual=r,
        converged=converged,
        iterations=iterations,
        segments=segments,
    )


def feedback_residual(traj, sol):
    """max_s |alpha(s) + D_v u(x(s), v(s), s)| along the trajectory."""
    dvu = sol.interpolate("dvu", traj.x, traj.v, traj.s)
    return float(np.max(np.abs(traj.alpha + dvu)))


def max_condition_gap(traj, samples=20, resolution=200001):
    """Largest gap between alpha p_v - alpha^2 / 2 at the computed alpha and its max over a dense grid."""
    indices = np.unique(np.rint(np.linspace(0, traj.s.size - 1, samples)).astype(int))
    bound = float(np.max(np.abs(traj.p_v))) + 1.0
    alphas = np.linspace(-bound, bound, resolution)
    gaps = []
    for i in indices:
        p = traj.p_v[i]
        computed = traj.alpha[i] * p - 0.5 * traj.alpha[i] ** 2
        dense = float(np.max(alphas * p - 0.5 * alphas**2))
        gaps.append((dense - computed) / (1.0 + abs(computed)))
    return float(max(gaps))


@dataclass
class GrowthReport:
    constants: list
    c_run: float
    spread: float

    @property
    def stable(self):
        return self.spread <= 0.3


def growth_check(trajectories):
    """Fit C_run in max(|v|, |v'|, |alpha|, |alpha'|) <= C_run (1 + |v0|)."""
    constants = []
    for traj in trajectories:
        d_alpha = np.gradient(traj.alpha, traj.s)
        peak = max(
            np.max(np.abs(traj.v)),
            np.max(np.abs(traj.p_v)),
            np.max(np.abs(traj.alpha)),
            np.max(np.abs(d_alpha)),
        )
        constants.append(float(peak) / (1.0 + abs(traj.v[0])))
    significant = [c for c, t in zip(constants, trajectories) if abs(t.v[0]) >= 1.0] or constants
    lo, hi = min(significant), max(significant)
    spread = (hi - lo) / (hi + lo) if hi + lo > 0 else 0.0
    return GrowthReport(constants=constants, c_run=max(constants), spread=spread)
