# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""Shared domain types of the mean field game with control on the acceleration.

The state of a generic player is the pair (x, v) (position, velocity), the
control is the acceleration, and the running cost is

    l(x, v, alpha) = l(x, v) + 1/2 |v|^2 + 1/2 |alpha|^2

so that the Hamiltonian reduces to H(x, v, p_v) = 1/2 |p_v|^2 - 1/2 |v|^2 - l.
Only the dimension N = 1 (phase space R^2) is supported.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, ndimage

from .exceptions import DensityValueError

CFL_SAFETY = 0.9
KERNEL_TRUNCATION = 4.0
COST_KINDS = ("zero", "constant", "cosine_bump", "gaussian_bump")
KERNEL_KINDS = ("gaussian", "self_convolution_gaussian")
DENSITY_KINDS = ("truncated_gaussian", "bump", "two_bumps")


@dataclass(frozen=True)
class PhaseGrid:
    """Truncated tensor discretization of the phase space (x, v).

    Nodes are also the centers of the finite volume cells used by the
    transport solver, so a field value is a cell average of area dx * dv.
    """

    x_min: float
    x_max: float
    v_min: float
    v_max: float
    nx: int
    nv: int
    dim: int = 1

    def __post_init__(self):
        if self.dim != 1:
            raise ValueError("Only the dimension N = 1 is supported.")
        if self.nx < 8 or self.nv < 8:
            raise ValueError(f"Grid needs at least 8 nodes per axis, got {self.nx}x{self.nv}.")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must be greater than x_min.")
        if not self.v_max > self.v_min:
            raise ValueError("v_max must be greater than v_min.")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dv(self):
        return (self.v_max - self.v_min) / (self.nv - 1)

    @property
    def shape(self):
        return (self.nx, self.nv)

    @property
    def cell_area(self):
        return self.dx * self.dv

    @property
    def max_speed(self):
        return max(abs(self.v_min), abs(self.v_max))

    @cached_property
    def x(self):
        return np.linspace(self.x_min, self.x_max, self.nx)

    @cached_property
    def v(self):
        return np.linspace(self.v_min, self.v_max, self.nv)

    @cached_property
    def mesh(self):
        """Return the (X, V) node coordinates, indexed as [i_x, j_v]."""
        X, V = np.meshgrid(self.x, self.v, indexing="ij")
        X.flags.writeable = False
        V.flags.writeable = False
        return X, V

    @cached_property
    def inner_mask(self):
        """Nodes of the inner half-box, where acceptance metrics are evaluated."""
        X, V = self.mesh
        xc, vc = 0.5 * (self.x_min + self.x_max), 0.5 * (self.v_min + self.v_max)
        half_x = 0.25 * (self.x_max - self.x_min)
        half_v = 0.25 * (self.v_max - self.v_min)
        mask = (np.abs(X - xc) <= half_x + 1e-12) & (np.abs(V - vc) <= half_v + 1e-12)
        mask.flags.writeable = False
        return mask

    @cached_property
    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
        mask.flags.writeable = False
        return mask

    def contains(self, x, v, inner=False):
        """Return a boolean array telling which points lie in the box."""
        x, v = np.asarray(x), np.asarray(v)
        if inner:
            xc, vc = 0.5 * (self.x_min + self.x_max), 0.5 * (self.v_min + self.v_max)
            return (np.abs(x - xc) <= 0.25 * (self.x_max - self.x_min)) & (
                np.abs(v - vc) <= 0.25 * (self.v_max - self.v_min)
            )
        return (
            (x >= self.x_min) & (x <= self.x_max) & (v >= self.v_min) & (v <= self.v_max)
        )

    def integrate(self, values):
        """Midpoint quadrature over the cells."""
        return float(np.sum(values) * self.cell_area)

    def scaled(self, factor):
        """Return the same box with node counts multiplied by `factor`."""
        return PhaseGrid(
            self.x_min,
            self.x_max,
            self.v_min,
            self.v_max,
            max(8, int(round(self.nx * factor))),
            max(8, int(round(self.nv * factor))),
            self.dim,
        )


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    nt: int
    start: float = 0.0

    def __post_init__(self):
        if self.nt < 1:
            raise ValueError("nt must be a positive integer.")
        if not self.horizon > self.start:
            raise ValueError("The horizon must be greater than the start time.")

    @property
    def dt(self):
        return (self.horizon - self.start) / self.nt

    @cached_property
    def t(self):
        return np.linspace(self.start, self.horizon, self.nt + 1)

    def checkpoints(self, count=5):
        """Return `count` slice indices evenly spread over [start, horizon]."""
        return sorted({int(i) for i in np.rint(np.linspace(0, self.nt, count))})

    def index_of(self, t):
        """Return the slice index of time `t` (nearest node)."""
        index = int(round((t - self.start) / self.dt))
        if index < 0 or index > self.nt or abs(self.t[index] - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"Time {t} is not a node of the time grid.")
        return index

    def window(self, start_index):
        """Return the sub-grid starting at slice `start_index`."""
        if not 0 <= start_index < self.nt:
            raise ValueError(f"Invalid start index {start_index}.")
        return TimeGrid(self.horizon, self.nt - start_index, float(self.t[start_index]))

    def scaled(self, factor):
        return TimeGrid(self.horizon, max(1, int(round(self.nt * factor))), self.start)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Values of u, m or l on the grid at one time."""

    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"Field shape {values.shape} does not match grid {self.grid.shape}.")
        if not np.all(np.isfinite(values)):
            raise ValueError("Field values must be finite.")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, func):
        X, V = grid.mesh
        return cls(grid, np.broadcast_to(func(X, V), grid.shape))

    def mass(self):
        return self.grid.integrate(self.values)

    def sup(self):
        return float(np.max(np.abs(self.values)))

    def integrate(self, func):
        """Return the integral of func(x, v) against this field."""
        X, V = self.grid.mesh
        return self.grid.integrate(func(X, V) * self.values)


@dataclass(frozen=True, eq=False)
class FieldPath:
    """Grid values stacked over all the slices of a time grid.

    `values` has shape (nt + 1, nx, nv).
    """

    time: TimeGrid
    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        expected = (self.time.nt + 1,) + self.grid.shape
        if values.shape != expected:
            raise ValueError(f"Path shape {values.shape} does not match {expected}.")
        if not np.all(np.isfinite(values)):
            raise ValueError("Path values must be finite.")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_slices(cls, time, slices):
        slices = list(slices)
        grid = slices[0].grid
        if any(s.grid != grid for s in slices):
            raise ValueError("All slices must share one grid.")
        return cls(time, grid, np.stack([s.values for s in slices]))

    @classmethod
    def constant(cls, time, field_):
        """Stationary path repeating `field_` at every slice."""
        values = np.broadcast_to(field_.values, (time.nt + 1,) + field_.grid.shape)
        return cls(time, field_.grid, values)

    @classmethod
    def from_function(cls, time, grid, func):
        """Build a path from func(t, X, V)."""
        X, V = grid.mesh
        return cls(time, grid, np.stack([np.broadcast_to(func(t, X, V), grid.shape) for t in time.t]))

    def __len__(self):
        return self.time.nt + 1

    def __getitem__(self, index):
        return ScalarField(self.grid, self.values[index])

    @property
    def slices(self):
        return [self[n] for n in range(len(self))]

    def window(self, start_index):
        return FieldPath(self.time.window(start_index), self.grid, self.values[start_index:])

    def sup(self):
        return float(np.max(np.abs(self.values)))


def _cost_bounds(kind, amplitude, length_x, length_v):
    a = abs(amplitude)
    if kind == "zero":
        return 0.0, 0.0, 0.0
    if kind == "constant":
        return a, 0.0, 0.0
    inv_x, inv_v = 1.0 / length_x, 1.0 / length_v
    hessian = a * (inv_x**2 + inv_v**2)
    if kind == "cosine_bump":
        return a, a * max(inv_x, inv_v), hessian
    return a, a * math.exp(-0.5) * max(inv_x, inv_v), hessian


@dataclass(frozen=True)
class RunningCost:
    """Bounded C^2 state cost l(x, v), also used for the terminal cost g.

    Kinds:
        zero:           l = 0
        constant:       l = A
        cosine_bump:    l = A cos(x / length_x) cos(v / length_v)
        gaussian_bump:  l = A exp(-(x^2 / length_x^2 + v^2 / length_v^2) / 2)
    """

    kind: str = "zero"
    amplitude: float = 0.0
    length_x: float = 1.0
    length_v: float = 1.0

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"Unknown cost kind '{self.kind}', expected one of {COST_KINDS}.")
        if self.length_x <= 0 or self.length_v <= 0:
            raise ValueError("Cost length scales must be positive.")

    def __call__(self, x, v):
        x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
        a = self.amplitude
        if self.kind == "zero":
            return np.zeros(np.broadcast(x, v).shape)
        if self.kind == "constant":
            return np.full(np.broadcast(x, v).shape, float(a))
        sx, sv = x / self.length_x, v / self.length_v
        if self.kind == "cosine_bump":
            return a * np.cos(sx) * np.cos(sv)
        return a * np.exp(-0.5 * (sx**2 + sv**2))

    def gradient(self, x, v):
        """Return (D_x l, D_v l)."""
        x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
        if self.kind in ("zero", "constant"):
            zero = np.zeros(np.broadcast(x, v).shape)
            return zero, zero.copy()
        a, lx, lv = self.amplitude, self.length_x, self.length_v
        sx, sv = x / lx, v / lv
        if self.kind == "cosine_bump":
            return -a / lx * np.sin(sx) * np.cos(sv), -a / lv * np.cos(sx) * np.sin(sv)
        e = a * np.exp(-0.5 * (sx**2 + sv**2))
        return -sx / lx * e, -sv / lv * e

    def bounds(self):
        """Closed-form sup-norms of (value, gradient, Hessian)."""
        return _cost_bounds(self.kind, self.amplitude, self.length_x, self.length_v)

    def c2_norm(self):
        return sum(self.bounds())

    def on_grid(self, grid):
        return ScalarField.from_function(grid, self)


@dataclass(frozen=True)
class CouplingSpec:
    """Kernel-smoothing nonlocal couplings F[m] = c_F K * m, G[m] = c_G K * m.

    K is the isotropic Gaussian of bandwidth rho, truncated at 4 bandwidths
    per axis and renormalized on the grid. The `self_convolution_gaussian`
    kind applies K twice, which makes the coupling monotone.
    """

    kernel: str = "gaussian"
    rho_f: float = 0.5
    rho_g: float = 0.5
    c_f: float = 0.0
    c_g: float = 0.0

    def __post_init__(self):
        if self.kernel not in KERNEL_KINDS:
            raise ValueError(f"Unknown kernel '{self.kernel}', expected one of {KERNEL_KINDS}.")
        if self.rho_f <= 0 or self.rho_g <= 0:
            raise ValueError("Kernel bandwidths must be positive.")
        if self.c_f < 0 or self.c_g < 0:
            raise ValueError("Coupling weights must be nonnegative.")

    @property
    def monotone(self):
        return self.kernel == "self_convolution_gaussian"

    @property
    def decoupled(self):
        return self.c_f == 0 and self.c_g == 0

    def weight(self, which):
        return {"F": self.c_f, "G": self.c_g}[which]

    def bandwidth(self, which):
        return {"F": self.rho_f, "G": self.rho_g}[which]

    def kernel_1d(self, spacing, which):
        """Discrete 1D factor of K, normalized so that sum(k) * spacing = 1."""
        rho = self.bandwidth(which)
        radius = int(math.ceil(KERNEL_TRUNCATION * rho / spacing))
        offsets = spacing * np.arange(-radius, radius + 1)
        weights = np.exp(-0.5 * (offsets / rho) ** 2)
        return weights / (weights.sum() * spacing)

    def kernel_amplitude(self, grid, which):
        """sup K on the grid."""
        kx = self.kernel_1d(grid.dx, which)
        kv = self.kernel_1d(grid.dv, which)
        return float(kx.max() * kv.max())

    def sup_bound(self, grid, which):
        """Bound of sup |F[m]| (resp. G) over probability densities."""
        c = self.weight(which)
        if self.kernel == "gaussian":
            return c * self.kernel_amplitude(grid, which)
        kx = self.kernel_1d(grid.dx, which)
        kv = self.kernel_1d(grid.dv, which)
        # value at 0 of K * K
        return c * float(np.sum(kx**2) * grid.dx * np.sum(kv**2) * grid.dv)

    def lipschitz_constant(self, grid, which):
        """Bound of |F[m1] - F[m2]| / d1(m1, m2): c * sup |grad K|."""
        rho = self.bandwidth(which)
        return self.weight(which) * self.kernel_amplitude(grid, which) * math.exp(-0.5) / rho

    def c2_bound(self, grid, which):
        """Bound of the C^2 norm of F[m] (resp. G) over probability densities."""
        rho = self.bandwidth(which)
        amp = self.sup_bound(grid, which)
        if self.kernel == "self_convolution_gaussian":
            rho = rho * math.sqrt(2.0)
        return amp * (1.0 + math.exp(-0.5) / rho + 2.0 / rho**2)

    def kernel_value(self, grid, x, v, which):
        """Continuous extension of the discrete kernel K(x, v)."""
        rho = self.bandwidth(which)
        amp = self.kernel_amplitude(grid, which)
        inside = (np.abs(x) <= KERNEL_TRUNCATION * rho + 1e-12) & (
            np.abs(v) <= KERNEL_TRUNCATION * rho + 1e-12
        )
        return np.where(inside, amp * np.exp(-0.5 * (np.square(x) + np.square(v)) / rho**2), 0.0)


@dataclass(frozen=True)
class InitialDensity:
    """Compactly supported initial density m0.

    Kinds:
        truncated_gaussian: (exp(-r^2/2) - exp(-R^2/2))_+ with r the
                            Mahalanobis distance to `center`
        bump:               (1 - r^2/R^2)_+^3
        two_bumps:          two bumps at center -/+ (separation/2, 0)

    `std` scales each axis, `correlation` couples them (Gaussian kind only),
    `radius` is R, in units of `std`.
    """

    kind: str = "truncated_gaussian"
    center: tuple = (0.0, 0.0)
    std: tuple = (0.5, 0.5)
    correlation: float = 0.0
    radius: float = 3.0
    separation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if self.kind not in DENSITY_KINDS:
            raise ValueError(f"Unknown density kind '{self.kind}', expected one of {DENSITY_KINDS}.")
        if len(self.center) != 2 or len(self.std) != 2:
            raise ValueError("center and std must have two components (x, v).")
        if min(self.std) <= 0 or self.radius <= 0:
            raise ValueError("std and radius must be positive.")
        if not -1 < self.correlation < 1:
            raise ValueError("correlation must lie in (-1, 1).")
        if self.kind == "two_bumps" and self.separation <= 0:
            raise ValueError("separation must be positive.")

    def support_box(self):
        """Return (x_lo, x_hi, v_lo, v_hi) enclosing the support."""
        half_x = self.radius * self.std[0]
        half_v = self.radius * self.std[1]
        cx, cv = self.center
        shift = 0.5 * self.separation if self.kind == "two_bumps" else 0.0
        return (cx - shift - half_x, cx + shift + half_x, cv - half_v, cv + half_v)

    def support_inside(self, grid, inner=False):
        x_lo, x_hi, v_lo, v_hi = self.support_box()
        if inner:
            corners = grid.contains(np.array([x_lo, x_hi]), np.array([v_lo, v_hi]), inner=True)
            return bool(np.all(corners))
        return x_lo > grid.x_min and x_hi < grid.x_max and v_lo > grid.v_min and v_hi < grid.v_max

    def _profile(self, X, V, cx):
        dx = (X - cx) / self.std[0]
        dv = (V - self.center[1]) / self.std[1]
        if self.kind == "truncated_gaussian":
            rho = self.correlation
            r2 = (dx**2 - 2 * rho * dx * dv + dv**2) / (1 - rho**2)
            return np.maximum(np.exp(-0.5 * r2) - math.exp(-0.5 * self.radius**2), 0.0)
        r2 = (dx**2 + dv**2) / self.radius**2
        return np.maximum(1.0 - r2, 0.0) ** 3

    def density(self, X, V):
        """Unnormalized density profile."""
        cx = self.center[0]
        if self.kind == "two_bumps":
            half = 0.5 * self.separation
            return self._profile(X, V, cx - half) + self._profile(X, V, cx + half)
        return self._profile(X, V, cx)

    def on_grid(self, grid):
        """Discretize m0 on `grid`, normalized to unit mass."""
        if not self.support_inside(grid):
            raise ValueError(f"Support {self.support_box()} of m0 is not strictly inside the grid box.")
        X, V = grid.mesh
        values = self.density(X, V)
        mass = grid.integrate(values)
        if mass <= 0:
            raise DensityValueError("m0 has no mass on this grid (support below resolution).")
        return ScalarField(grid, values / mass)


@dataclass(frozen=True)
class LQOracle:
    """Closed-form value of the linear-quadratic instance l = 0, g = 0."""

    horizon: float

    def feedback_slope(self, t):
        return np.tanh(self.horizon - np.asarray(t, dtype=float))

    def value(self, x, v, t):
        return lq_value(x, v, t, self.horizon)

    def velocity(self, v0, s, t0=0.0):
        """Optimal velocity v(s) starting from v0 at t0."""
        T = self.horizon
        return v0 * np.cosh(T - np.asarray(s, dtype=float)) / np.cosh(T - t0)

    def control(self, v0, s, t0=0.0):
        return -self.feedback_slope(s) * self.velocity(v0, s, t0)

    def feedback_cost(self, v0, t0=0.0, samples=4001):
        """Cost of the feedback trajectory, by quadrature."""
        s = np.linspace(t0, self.horizon, samples)
        integrand = 0.5 * self.control(v0, s, t0) ** 2 + 0.5 * self.velocity(v0, s, t0) ** 2
        return float(integrate.simpson(integrand, x=s))

    def riccati_slope(self, t, step=1e-4):
        """Integrate P' = P^2 - 1, P(T) = 0 backward to `t`."""
        if t >= self.horizon:
            return 0.0
        sol = integrate.solve_ivp(
            lambda _, p: p**2 - 1.0,
            (self.horizon, t),
            [0.0],
            method="DOP853",
            first_step=step,
            max_step=step,
            rtol=1e-12,
            atol=1e-14,
        )
        return float(sol.y[0, -1])


@dataclass(frozen=True)
class InstanceConstants:
    """Per-instance constants standing for the joint bound C of l, F and G."""

    running_cost: float
    terminal_cost: float
    coupling_f: float
    coupling_g: float
    lipschitz_f: float
    lipschitz_g: float
    sup_ell: float
    sup_g: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total", self.running_cost + self.terminal_cost + self.coupling_f + self.coupling_g
        )


def instance_constants(grid, running_cost, terminal_cost, coupling):
    l0 = running_cost.bounds()[0]
    g0 = terminal_cost.bounds()[0]
    return InstanceConstants(
        running_cost=running_cost.c2_norm(),
        terminal_cost=terminal_cost.c2_norm(),
        coupling_f=coupling.c2_bound(grid, "F"),
        coupling_g=coupling.c2_bound(grid, "G"),
        lipschitz_f=coupling.lipschitz_constant(grid, "F"),
        lipschitz_g=coupling.lipschitz_constant(grid, "G"),
        sup_ell=l0 + coupling.sup_bound(grid, "F"),
        sup_g=g0 + coupling.sup_bound(grid, "G"),
    )


def eval_hamiltonian(v, p_v, l_val):
    """H(x, v, p_v) = max_alpha (-alpha p_v - l(x, v, alpha)).

    The maximizer is alpha* = -p_v.
    """
    p_v = np.asarray(p_v, dtype=float)
    v = np.asarray(v, dtype=float)
    return 0.5 * p_v**2 - 0.5 * v**2 - np.asarray(l_val, dtype=float)


def optimal_control(p_v):
    return -np.asarray(p_v, dtype=float)


def check_density(m, tol=1e-3):
    """Raise if `m` is not a (numerically) normalized nonnegative density."""
    mass = m.mass()
    if abs(mass - 1.0) > tol:
        raise DensityValueError(f"Density mass {mass:.8g} deviates from 1 (unnormalized density).")
    if np.min(m.values) < -1e-10:
        raise DensityValueError("Density has negative values.")
    return mass


def _smooth(spec, grid, values, which):
    kx = spec.kernel_1d(grid.dx, which) * grid.dx
    kv = spec.kernel_1d(grid.dv, which) * grid.dv
    out = ndimage.convolve1d(values, kx, axis=0, mode="constant", cval=0.0)
    return ndimage.convolve1d(out, kv, axis=1, mode="constant", cval=0.0)


def eval_coupling(spec, m, which):
    """Return F[m] (which='F') or G[m] (which='G') as a ScalarField."""
    if which not in ("F", "G"):
        raise ValueError("which must be 'F' or 'G'.")
    check_density(m)
    c = spec.weight(which)
    if c == 0:
        return ScalarField.zeros(m.grid)
    out = _smooth(spec, m.grid, m.values, which)
    if spec.kernel == "self_convolution_gaussian":
        out = _smooth(spec, m.grid, out, which)
    return ScalarField(m.grid, c * out)


def monotonicity_integral(spec, m1, m2, which="F"):
    """Return the integral of (F[m1] - F[m2]) d(m1 - m2)."""
    diff = eval_coupling(spec, m1, which).values - eval_coupling(spec, m2, which).values
    return m1.grid.integrate(diff * (m1.values - m2.values))


def lq_value(x, v, t, T):
    """Value of the LQ instance: 1/2 tanh(T - t) v^2."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ValueError(f"t must lie in [0, {T}].")
    v = np.asarray(v, dtype=float)
    value = 0.5 * np.tanh(T - t_arr) * v**2 + 0.0 * np.asarray(x, dtype=float)
    return float(value) if value.ndim == 0 else value


def cfl_dt(grid, max_dvu, sigma):
    """Largest stable explicit time step (safety factor 0.9)."""
    if max_dvu < 0 or sigma < 0:
        raise ValueError("max_dvu and sigma must be nonnegative.")

    def ratio(num, den):
        return num / den if den > 0 else math.inf

    return CFL_SAFETY * min(
        ratio(grid.dx, grid.max_speed),
        ratio(grid.dv, max_dvu),
        ratio(grid.dx**2, 4 * sigma),
        ratio(grid.dv**2, 4 * sigma),
    )
