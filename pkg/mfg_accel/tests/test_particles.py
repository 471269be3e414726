import numpy as np

from . import common

from mfg_accel.app import PARTICLE_TOLERANCES
from mfg_accel.exceptions import ParticleExit
from mfg_accel.mfg import picard_solve
from mfg_accel.model import FieldPath, PhaseGrid, ScalarField, TimeGrid
from mfg_accel.particles import (
    ParticleEnsemble,
    advect,
    representation_check,
    sample_from_density,
)


class TestSampling(common.CommonCase):
    def _block_density(self, size):
        values = np.zeros(self.grid.shape)
        values[10 : 10 + size, 10 : 10 + size] = 1.0
        return ScalarField(self.grid, values / self.grid.integrate(values))

    def test_stratification(self):
        m0 = self._block_density(20)
        ensemble = sample_from_density(m0, 1600)
        self.assertEqual(len(ensemble), 1600)
        np.testing.assert_allclose(ensemble.w, 1.0 / 1600)
        # 2 x 2 sub-cells per active cell
        self.assertAlmostEqual(np.min(ensemble.x), self.grid.x[10] - 0.25 * self.grid.dx)
        self.assertEqual(np.unique(ensemble.x).size, 40)

    def test_weights(self):
        ensemble = sample_from_density(self.density, 4000, grid=self.grid)
        self.assertAlmostEqual(ensemble.w.sum(), 1.0, delta=1e-12)
        self.assertGreaterEqual(len(ensemble), 4000)
        m0 = self.density.on_grid(self.grid)
        for func in (lambda x, v: x, lambda x, v: v):
            self.assertAlmostEqual(ensemble.expectation(func), m0.integrate(func), delta=1e-12)

    def test_rejections(self):
        with self.assertRaisesRegex(ValueError, "At least 100"):
            sample_from_density(self._block_density(20), 50)
        with self.assertRaisesRegex(ValueError, "degenerate"):
            sample_from_density(self._block_density(5), 1000)
        with self.assertRaisesRegex(ValueError, "grid is required"):
            sample_from_density(self.density, 1000)
        with self.assertRaises(ValueError):
            ParticleEnsemble([0.0, 1.0], [0.0, 0.0], [0.5, 0.6])


class TestAdvection(common.CommonCase):
    def _zero_drift(self):
        return FieldPath(self.time, self.grid, np.zeros((self.time.nt + 1,) + self.grid.shape))

    def test_free_flow(self):
        ensemble = sample_from_density(self.density, 400, grid=self.grid)
        trajectories = advect(ensemble, self._zero_drift())
        t = self.time.t[:, None]
        np.testing.assert_allclose(trajectories.x, ensemble.x[None] + ensemble.v[None] * t, atol=1e-10)
        np.testing.assert_array_equal(trajectories.v[-1], ensemble.v)

    def test_exit(self):
        ensemble = ParticleEnsemble([3.5, 0.0], [2.0, 0.0], [0.5, 0.5])
        with self.assertRaises(ParticleExit) as ctx:
            advect(ensemble, self._zero_drift())
        self.assertEqual(ctx.exception.index, 0)
        self.assertAlmostEqual(ctx.exception.time, 0.25, delta=2 * self.time.dt)

    def test_ordering_is_kept(self):
        sol, _ = self._lq_solution()
        ensemble = sample_from_density(self.density, 400, grid=self.grid)
        trajectories = advect(ensemble, sol.dvu)
        # the closed-loop flow is monotone in the initial velocity on a row
        row = np.isclose(ensemble.x, ensemble.x[0])
        order = np.argsort(ensemble.v[row])
        final = trajectories.v[-1][row][order]
        self.assertTrue(np.all(np.diff(final) > 0))


class TestRepresentation(common.CommonCase):
    def _report(self, problem, n_particles=4000):
        solution = picard_solve(problem)
        ensemble = sample_from_density(problem.m0(), n_particles)
        trajectories = advect(ensemble, solution.u.dvu)
        return representation_check(trajectories, solution.m)

    def test_lq_game(self):
        problem = self._problem(
            grid=self.baseline_grid, time=self.baseline_time, transport_scheme="muscl"
        )
        report = self._report(problem)
        self.assertLessEqual(report.max_abs("1"), 1e-8)
        self.assertLessEqual(report.max_rel(), 0.05)
        self.assertEqual(len(report.rows), 5 * 9)

    def test_upwind_refinement(self):
        coarse = self._report(self._problem())
        fine = self._report(
            self._problem(grid=PhaseGrid(-4.0, 4.0, -3.0, 3.0, 97, 97), time=TimeGrid(1.0, 200))
        )
        self.assertLessEqual(fine.max_abs("1"), 1e-8)
        self.assertLessEqual(fine.max_rel(), PARTICLE_TOLERANCES["upwind"])
        self.assertLessEqual(fine.max_rel(), 0.75 * coarse.max_rel())
