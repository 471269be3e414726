import functools
import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from mfg_accel.app import App
from mfg_accel.hjb import effective_cost, solve_hjb_backward
from mfg_accel.mfg import MFGProblem
from mfg_accel.model import (
    CouplingSpec,
    InitialDensity,
    PhaseGrid,
    RunningCost,
    ScalarField,
    TimeGrid,
)
from mfg_accel.utils.config import RunConfig

# Odd node counts keep v = 0 (and x = 0) on the grid.
REDUCED_GRID = PhaseGrid(-4.0, 4.0, -3.0, 3.0, 49, 49)
REDUCED_TIME = TimeGrid(1.0, 100)
BASELINE_GRID = PhaseGrid(-4.0, 4.0, -3.0, 3.0, 96, 96)
BASELINE_TIME = TimeGrid(1.0, 200)


@functools.lru_cache(maxsize=None)
def value_solution(grid, time, running_cost=RunningCost(), terminal_cost=RunningCost(), sigma=0.0):
    """Decoupled HJB solution, shared by the test modules."""
    cost = effective_cost(grid, time, running_cost, terminal_cost)
    return solve_hjb_backward(cost, sigma, grid, time), cost


class CommonCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.grid = REDUCED_GRID
        cls.time = REDUCED_TIME
        cls.baseline_grid = BASELINE_GRID
        cls.baseline_time = BASELINE_TIME
        cls.lq_cost = RunningCost()
        cls.bump_cost = RunningCost("cosine_bump", 0.2, 1.0, 1.0)
        cls.density = InitialDensity(center=(0.0, 0.0), std=(0.4, 0.4), radius=3.0)
        cls.weak_coupling = CouplingSpec(kernel="gaussian", rho_f=0.5, c_f=0.05)
        cls.no_fixtures = True

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmp_dir, ignore_errors=True)
        # Never touch the user cache
        self.patcher = patch.dict(
            os.environ, {"XDG_CACHE_HOME": os.path.join(self.tmp_dir, "cache")}
        )
        self.patcher.start()
        self.addCleanup(self.patcher.stop)

    def _problem(self, **kwargs):
        kwargs.setdefault("grid", self.grid)
        kwargs.setdefault("time", self.time)
        kwargs.setdefault("initial_density", self.density)
        return MFGProblem(**kwargs)

    def _create_app(self, study, config=None, **kwargs):
        kwargs.setdefault("out_dir", os.path.join(self.tmp_dir, "out"))
        kwargs.setdefault("no_fixtures", self.no_fixtures)
        if config is None and "config_path" not in kwargs:
            config = RunConfig(problem=self._problem())
        return App(study=study, config=config, **kwargs)

    def _write_config(self, content, name="config.json"):
        path = os.path.join(self.tmp_dir, name)
        with open(path, "w") as file_:
            file_.write(content)
        return path

    def _lq_solution(self, grid=None, time=None, sigma=0.0):
        return value_solution(grid or self.grid, time or self.time, sigma=sigma)

    def _bump_solution(self, grid=None, time=None, sigma=0.0):
        return value_solution(grid or self.grid, time or self.time, self.bump_cost, sigma=sigma)

    def _random_density(self, rng, grid=None):
        """Smooth random probability density supported in the inner half-box."""
        grid = grid or self.grid
        X, V = grid.mesh
        values = np.zeros(grid.shape)
        for _ in range(3):
            cx, cv = rng.uniform(-1.0, 1.0, 2)
            values += rng.uniform(0.2, 1.0) * np.exp(-((X - cx) ** 2 + (V - cv) ** 2) / 0.3)
        values[~grid.inner_mask] = 0.0
        return ScalarField(grid, values / grid.integrate(values))
