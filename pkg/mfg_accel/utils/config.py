# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""JSON run configuration.

A configuration file holds one object with the sections `problem`,
`iteration` and `studies`, e.g.:

    {
      "problem": {
        "grid": {"x_min": -4, "x_max": 4, "v_min": -3, "v_max": 3, "nx": 96, "nv": 96},
        "time": {"horizon": 1.0, "nt": 200},
        "running_cost": {"kind": "cosine_bump", "amplitude": 0.2},
        "coupling": {"kernel": "gaussian", "c_f": 0.05},
        "initial_density": {"kind": "truncated_gaussian", "std": [0.4, 0.4]},
        "sigma": 0.0
      },
      "iteration": {"damping": 0.5, "tol_fp": 1e-4},
      "studies": {"sigmas": [0.1, 0.05, 0.02, 0.01]}
    }

Every section and key is optional; unknown keys are rejected.
"""

import dataclasses
import json
from dataclasses import dataclass, field, replace

from ..exceptions import ConfigValueError
from ..mfg import IterationConfig, MFGProblem
from ..model import CouplingSpec, InitialDensity, PhaseGrid, RunningCost, TimeGrid

BASELINE_GRID = PhaseGrid(-4.0, 4.0, -3.0, 3.0, 96, 96)
BASELINE_TIME = TimeGrid(1.0, 200)


@dataclass(frozen=True)
class StudyConfig:
    sigmas: tuple = (0.1, 0.05, 0.02, 0.01)
    n_particles: int = 4000
    n_starts: int = 20
    seed: int = 0
    workers: int = 1
    segments: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be nonnegative.")
        if self.n_starts < 1 or self.workers < 1 or self.segments < 1:
            raise ValueError("n_starts, workers and segments must be positive integers.")


@dataclass(frozen=True)
class RunConfig:
    problem: MFGProblem = field(
        default_factory=lambda: MFGProblem(grid=BASELINE_GRID, time=BASELINE_TIME)
    )
    iteration: IterationConfig = field(default_factory=IterationConfig)
    studies: StudyConfig = field(default_factory=StudyConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def scaled(self, factor):
        """Multiply every grid resolution (nx, nv and nt) by `factor`."""
        if factor <= 0:
            raise ConfigValueError("resolution scale must be positive.")
        if factor == 1:
            return self
        problem = self.problem
        return self._replace_problem(grid=problem.grid.scaled(factor), time=problem.time.scaled(factor))

    def with_sigma(self, sigma):
        if sigma is None:
            return self
        return self._replace_problem(sigma=sigma)

    def _replace_problem(self, **changes):
        try:
            return replace(self, problem=replace(self.problem, **changes))
        except ValueError as exc:
            raise ConfigValueError(f"problem: {exc}") from exc


_SECTIONS = {
    "grid": PhaseGrid,
    "time": TimeGrid,
    "running_cost": RunningCost,
    "terminal_cost": RunningCost,
    "coupling": CouplingSpec,
    "initial_density": InitialDensity,
}


def _build(cls, data, path, defaults=None):
    """Instantiate the dataclass `cls` from `data`, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigValueError(f"'{path}' must be an object.")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigValueError(f"unknown key '{path}.{key}'")
    values = dict(defaults or {})
    values.update(data)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigValueError(f"{path}: {exc}") from exc


def _build_problem(data):
    if not isinstance(data, dict):
        raise ConfigValueError("'problem' must be an object.")
    defaults = dataclasses.asdict(MFGProblem(grid=BASELINE_GRID, time=BASELINE_TIME))
    values = {}
    for key, raw in data.items():
        if key in _SECTIONS:
            values[key] = _build(_SECTIONS[key], raw, f"problem.{key}", defaults[key])
        elif key in ("sigma", "hamiltonian_flux", "transport_scheme"):
            values[key] = raw
        else:
            raise ConfigValueError(f"unknown key 'problem.{key}'")
    values.setdefault("grid", BASELINE_GRID)
    values.setdefault("time", BASELINE_TIME)
    try:
        return MFGProblem(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigValueError(f"problem: {exc}") from exc


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigValueError("The configuration must be a JSON object.")
    for key in data:
        if key not in ("problem", "iteration", "studies"):
            raise ConfigValueError(f"unknown key '{key}'")
    return RunConfig(
        problem=_build_problem(data.get("problem", {})),
        iteration=_build(IterationConfig, data.get("iteration", {}), "iteration"),
        studies=_build(StudyConfig, data.get("studies", {}), "studies"),
    )


def load_config(path):
    """Read and validate the JSON configuration file at `path`."""
    try:
        with open(path) as file_:
            data = json.load(file_)
    except OSError as exc:
        raise ConfigValueError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)
