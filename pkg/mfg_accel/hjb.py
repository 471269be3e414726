# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""Backward solver of the Hamilton-Jacobi-Bellman equation

    -u_t - sigma Lap u - v D_x u + 1/2 |D_v u|^2 - 1/2 v^2 - ell = 0,
    u(T) = g,

with a monotone explicit finite difference scheme, and a priori checks
(bounds, Lipschitz, semiconcavity, dynamic programming) on its output.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .exceptions import CFLViolation, NonFiniteValue
from .model import FieldPath, RunningCost, ScalarField, cfl_dt, eval_coupling

_logger = logging.getLogger(__name__)

FLUXES = ("godunov", "lax_friedrichs")


@dataclass(frozen=True, eq=False)
class EffectiveCost:
    """ell(x, v, t) = l(x, v) + F[m(t)](x, v) and g = g_0 + G[m(T)]."""

    ell: FieldPath
    g: ScalarField

    def __post_init__(self):
        if self.ell.grid != self.g.grid:
            raise ValueError("ell and g must share one grid.")

    @property
    def grid(self):
        return self.ell.grid

    @property
    def time(self):
        return self.ell.time

    def sup_ell(self):
        return self.ell.sup()

    def sup_g(self):
        return self.g.sup()


def effective_cost(grid, time, running_cost, terminal_cost=None, coupling=None, m_path=None):
    """Freeze the measure path `m_path` in the couplings.

    Without coupling (or without measure path) ell = l and g = g_0.
    """
    terminal_cost = terminal_cost or RunningCost()
    base = running_cost.on_grid(grid).values
    g = terminal_cost.on_grid(grid).values
    if coupling is None or m_path is None or coupling.decoupled:
        ell = np.broadcast_to(base, (time.nt + 1,) + grid.shape)
        return EffectiveCost(FieldPath(time, grid, ell), ScalarField(grid, g))
    ell = np.empty((time.nt + 1,) + grid.shape)
    for n in range(time.nt + 1):
        ell[n] = base + eval_coupling(coupling, m_path[n], "F").values
    g = g + eval_coupling(coupling, m_path[time.nt], "G").values
    return EffectiveCost(FieldPath(time, grid, ell), ScalarField(grid, g))


@dataclass(frozen=True, eq=False)
class ValueSolution:
    """Value function u and its gradients on every slice."""

    u: FieldPath
    dxu: FieldPath
    dvu: FieldPath
    sigma: float
    flux: str
    cfl_margin: float

    @property
    def grid(self):
        return self.u.grid

    @property
    def time(self):
        return self.u.time

    @property
    def max_gradient(self):
        return float(np.max(np.abs(self.dvu.values)))

    @cached_property
    def _interpolators(self):
        axes = (self.time.t, self.grid.x, self.grid.v)
        return {
            name: RegularGridInterpolator(
                axes, getattr(self, name).values, bounds_error=False, fill_value=None
            )
            for name in ("u", "dxu", "dvu")
        }

    def interpolate(self, name, x, v, t):
        """Trilinear interpolation of `name` in ('u', 'dxu', 'dvu')."""
        x, v, t = np.broadcast_arrays(
            np.asarray(x, dtype=float), np.asarray(v, dtype=float), np.asarray(t, dtype=float)
        )
        points = np.stack([t.ravel(), x.ravel(), v.ravel()], axis=-1)
        return self._interpolators[name](points).reshape(x.shape)

    def value_at(self, x, v, t):
        return self.interpolate("u", x, v, t)


def _pad(u, mode="edge"):
    # constant ghost layer for one-sided differences, linear extrapolation
    # for the Laplacian
    if mode == "odd":
        return np.pad(u, 1, mode="reflect", reflect_type="odd")
    return np.pad(u, 1, mode=mode)


def _numerical_hamiltonian(flux, dvf, dvb):
    """Monotone approximation of 1/2 |D_v u|^2."""
    if flux == "godunov":
        return 0.5 * np.maximum(np.maximum(dvb, 0.0) ** 2, np.minimum(dvf, 0.0) ** 2)
    theta = float(max(np.max(np.abs(dvf)), np.max(np.abs(dvb))))
    mean = 0.5 * (dvf + dvb)
    return 0.5 * mean**2 - 0.5 * theta * (dvf - dvb)


def _backward_step(u, ell, V, grid, dt, sigma, flux):
    up = _pad(u)
    dx, dv = grid.dx, grid.dv
    dxf = (up[2:, 1:-1] - u) / dx
    dxb = (u - up[:-2, 1:-1]) / dx
    dvf = (up[1:-1, 2:] - u) / dv
    dvb = (u - up[1:-1, :-2]) / dv
    # upwind along the characteristic x' = v
    transport = np.where(V > 0, V * dxf, V * dxb)
    rhs = transport - _numerical_hamiltonian(flux, dvf, dvb) + 0.5 * V**2 + ell
    if sigma > 0:
        uo = _pad(u, "odd")
        lap = (uo[2:, 1:-1] - 2 * u + uo[:-2, 1:-1]) / dx**2
        lap += (uo[1:-1, 2:] - 2 * u + uo[1:-1, :-2]) / dv**2
        rhs = rhs + sigma * lap
    return u + dt * rhs


def _one_sided_sup(u, dv):
    up = _pad(u)
    return float(
        max(
            np.max(np.abs(up[1:-1, 2:] - u)),
            np.max(np.abs(u - up[1:-1, :-2])),
        )
        / dv
    )


def solve_hjb_backward(cost, sigma, grid, time, flux="godunov"):
    """March the value function backward from u(T) = g.

    Raises CFLViolation when a slice would be unstable and NonFiniteValue
    when a NaN or an infinity appears.
    """
    if flux not in FLUXES:
        raise ValueError(f"Unknown Hamiltonian flux '{flux}', expected one of {FLUXES}.")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative.")
    if cost.grid != grid or cost.time != time:
        raise ValueError("The effective cost is not defined on the solver grids.")
    _, V = grid.mesh
    dt = time.dt
    values = np.empty((time.nt + 1,) + grid.shape)
    values[time.nt] = cost.g.values
    margin = np.inf
    for n in range(time.nt - 1, -1, -1):
        u = values[n + 1]
        dt_max = cfl_dt(grid, _one_sided_sup(u, grid.dv), sigma)
        if dt > dt_max:
            raise CFLViolation("hjb", n + 1, dt, dt_max)
        margin = min(margin, dt_max / dt)
        new = _backward_step(u, cost.ell.values[n + 1], V, grid, dt, sigma, flux)
        if not np.all(np.isfinite(new)):
            raise NonFiniteValue("hjb", n)
        values[n] = new
        _logger.debug("hjb slice %s: sup|u|=%.4g", n, np.max(np.abs(new)))
    dxu = np.gradient(values, grid.dx, axis=1)
    dvu = np.gradient(values, grid.dv, axis=2)
    _logger.debug("hjb solved, CFL margin %.3g", margin)
    return ValueSolution(
        u=FieldPath(time, grid, values),
        dxu=FieldPath(time, grid, dxu),
        dvu=FieldPath(time, grid, dvu),
        sigma=sigma,
        flux=flux,
        cfl_margin=float(margin),
    )


@dataclass
class BoundReport:
    lower_margin: float
    upper_margin: float
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations


def check_value_bounds(sol, cost, tol_scheme=1e-9, max_violations=20):
    """Compare u with the bounds given by the zero-acceleration competitor.

    lower = -(T sup|ell| + sup|g|)
    upper = (T - t)(sup|ell| + v^2 / 2) + sup|g| + sigma (T - t)^2 / 2
    """
    grid, time = sol.grid, sol.time
    sup_ell, sup_g = cost.sup_ell(), cost.sup_g()
    _, V = grid.mesh
    remaining = (time.horizon - time.t)[:, None, None]
    lower = -(time.horizon * sup_ell + sup_g) - tol_scheme
    upper = remaining * (sup_ell + 0.5 * V**2) + sup_g + 0.5 * sol.sigma * remaining**2 + tol_scheme
    u = sol.u.values
    bad = np.argwhere((u < lower) | (u > upper))
    violations = [
        {
            "slice": int(n),
            "x": float(grid.x[i]),
            "v": float(grid.v[j]),
            "value": float(u[n, i, j]),
            "lower": float(lower),
            "upper": float(upper[n, i, j]),
        }
        for n, i, j in bad[:max_violations]
    ]
    return BoundReport(
        lower_margin=float(np.min(u - lower)),
        upper_margin=float(np.min(upper - u)),
        violations=violations,
    )


@dataclass
class LipschitzReport:
    dx_ratio: float
    dv_ratio: float
    dt_ratio: float


def _region(grid, inner):
    if inner:
        return grid.inner_mask
    return np.ones(grid.shape, dtype=bool)


def lipschitz_report(sol, inner=True):
    """Discrete Lipschitz ratios of u: |D_x u|, |D_v u| / (1 + |v|) and |u_t| / (1 + v^2)."""
    grid, time = sol.grid, sol.time
    u = sol.u.values
    mask = _region(grid, inner)
    v = grid.v
    ddx = np.abs(np.diff(u, axis=1)) / grid.dx
    ddx_mask = mask[1:, :] & mask[:-1, :]
    v_mid = 0.5 * (v[1:] + v[:-1])
    ddv = np.abs(np.diff(u, axis=2)) / grid.dv / (1 + np.abs(v_mid))
    ddv_mask = mask[:, 1:] & mask[:, :-1]
    ddt = np.abs(np.diff(u, axis=0)) / time.dt / (1 + v**2)
    return LipschitzReport(
        dx_ratio=float(np.max(ddx[:, ddx_mask])),
        dv_ratio=float(np.max(ddv[:, ddv_mask])),
        dt_ratio=float(np.max(ddt[:, mask])),
    )


def semiconcavity_report(sol, inner=True):
    """Largest second difference quotient of u over the directions x, v, x+v, x-v."""
    grid = sol.grid
    u = sol.u.values
    mask = _region(grid, inner)[1:-1, 1:-1]
    center = u[:, 1:-1, 1:-1]
    quotients = []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        plus = u[:, 1 + di : u.shape[1] - 1 + di, 1 + dj : u.shape[2] - 1 + dj]
        minus = u[:, 1 - di : u.shape[1] - 1 - di, 1 - dj : u.shape[2] - 1 - dj]
        step2 = (di * grid.dx) ** 2 + (dj * grid.dv) ** 2
        quotients.append(np.max(((plus - 2 * center + minus) / step2)[:, mask]))
    return float(max(quotients))


@dataclass
class DPPReport:
    residuals: list
    max_residual: float


def dpp_consistency(sol, cost, samples, alpha_step=None, alpha_max=None):
    """Residual of the one-step dynamic programming principle at `samples`.

    Each sample (x, v, t) needs t + dt <= T. The minimum over the
    acceleration is taken on a symmetric grid containing alpha = 0.
    """
    grid, time = sol.grid, sol.time
    dt = time.dt
    alpha_step = alpha_step or grid.dv
    if alpha_max is None:
        alpha_max = 1.5 * sol.max_gradient + 1.0
    count = int(np.ceil(alpha_max / alpha_step))
    alphas = alpha_step * np.arange(-count, count + 1)
    ell = RegularGridInterpolator(
        (time.t, grid.x, grid.v), cost.ell.values, bounds_error=False, fill_value=None
    )
    residuals = []
    for x, v, t in samples:
        if t + dt > time.horizon + 1e-12:
            raise ValueError(f"Sample time {t} leaves no room for one step before T.")
        running = dt * (0.5 * alphas**2 + 0.5 * v**2 + ell([[t, x, v]])[0])
        ahead = sol.value_at(np.full_like(alphas, x + v * dt), v + alphas * dt, t + dt)
        residuals.append(abs(float(sol.value_at(x, v, t)) - float(np.min(running + ahead))))
    return DPPReport(residuals=residuals, max_residual=max(residuals) if residuals else 0.0)
