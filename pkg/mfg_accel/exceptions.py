# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)


class ConfigValueError(ValueError):
    pass


class DensityValueError(ValueError):
    pass


class SolverAbort(RuntimeError):
    """Base class of run-time aborts raised by the solvers."""


class CFLViolation(SolverAbort):
    def __init__(self, solver, slice_index, dt, dt_max):
        super().__init__(
            f"{solver}: time step {dt:.6g} exceeds the stable step "
            f"{dt_max:.6g} at slice {slice_index}"
        )
        self.solver = solver
        self.slice_index = slice_index
        self.dt = dt
        self.dt_max = dt_max


class NonFiniteValue(SolverAbort):
    def __init__(self, solver, slice_index):
        super().__init__(f"{solver}: non-finite value at slice {slice_index}")
        self.solver = solver
        self.slice_index = slice_index


class BoundaryLeakage(SolverAbort):
    pass


class ClampCorrectionError(SolverAbort):
    pass


class ParticleExit(SolverAbort):
    def __init__(self, index, time):
        super().__init__(
            f"particle {index} left the grid box at t={time:.6g} "
            "(truncation box too tight)"
        )
        self.index = index
        self.time = time


class TrajectoryDivergence(SolverAbort):
    pass
