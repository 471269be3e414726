from dataclasses import replace

import numpy as np

from . import common

from mfg_accel.hjb import lipschitz_report
from mfg_accel.mfg import (
    UNIFORM_CONSTANTS,
    UNIFORM_SPREAD,
    IterationConfig,
    MFGProblem,
    SweepEntry,
    SweepReport,
    _bump,
    initial_path,
    kkt_residuals,
    picard_solve,
    terminal_gap_threshold,
    uniqueness_probe,
    viscosity_sweep,
)
from mfg_accel.model import CouplingSpec, InitialDensity, PhaseGrid, TimeGrid
from mfg_accel.transport import moment_report, positivity_report, time_holder_report


class TestProblem(common.CommonCase):
    def test_validation(self):
        with self.assertRaisesRegex(ValueError, "sigma"):
            self._problem(sigma=-0.1)
        with self.assertRaisesRegex(ValueError, "Hamiltonian flux"):
            self._problem(hamiltonian_flux="upwind")
        with self.assertRaisesRegex(ValueError, "transport scheme"):
            self._problem(transport_scheme="weno")
        with self.assertRaisesRegex(ValueError, "support"):
            self._problem(initial_density=InitialDensity(center=(3.5, 0.0)))
        with self.assertRaisesRegex(ValueError, "stable step"):
            self._problem(time=TimeGrid(1.0, 10))

    def test_with_sigma(self):
        problem = self._problem()
        viscous = problem.with_sigma(0.05)
        self.assertEqual(viscous.sigma, 0.05)
        self.assertEqual(problem.sigma, 0.0)
        self.assertEqual(viscous.grid, problem.grid)

    def test_iteration_config(self):
        cfg = IterationConfig(fictitious_play=True)
        self.assertEqual([cfg.weight(k) for k in (1, 2, 4)], [1.0, 0.5, 0.25])
        self.assertEqual(IterationConfig().weight(7), 0.5)
        for kwargs in ({"damping": 0.0}, {"tol_fp": 0.0}, {"metric": "linf"}, {"init": "random"}):
            with self.assertRaises(ValueError):
                IterationConfig(**kwargs)

    def test_initial_paths(self):
        problem = self._problem()
        stationary = initial_path(problem, "stationary")
        np.testing.assert_array_equal(stationary.values[-1], problem.m0().values)
        moved = initial_path(problem, "free_transport")
        np.testing.assert_array_equal(moved.values[0], problem.m0().values)


class TestPicard(common.CommonCase):
    def test_decoupled_converges_at_once(self):
        problem = self._problem()
        solution = picard_solve(problem)
        self.assertTrue(solution.converged)
        self.assertEqual(solution.iterations, 1)
        self.assertEqual(solution.residual_history, [0.0])
        self.assertEqual(solution.terminal_coupling_gap, 0.0)
        np.testing.assert_array_equal(solution.iterate.values, solution.m.m.values)

    def test_weak_coupling(self):
        problem = self._problem(running_cost=self.bump_cost, coupling=self.weak_coupling)
        solution = picard_solve(problem)
        self.assertTrue(solution.converged)
        self.assertLessEqual(solution.iterations, 20)
        self.assertLessEqual(solution.residual_history[-1], 1e-4)
        np.testing.assert_allclose(solution.m.mass, 1.0, atol=1e-8)
        self.assertEqual(len(solution.l1_history), solution.iterations)

    def test_terminal_coupling(self):
        coupling = CouplingSpec(c_f=0.05, c_g=0.05)
        problem = self._problem(running_cost=self.bump_cost, coupling=coupling)
        for cfg in (IterationConfig(tol_fp=1e-6), IterationConfig(metric="l1", tol_fp=1e-5)):
            solution = picard_solve(problem, cfg)
            self.assertTrue(solution.converged)
            gap = solution.terminal_coupling_gap
            self.assertGreater(gap, 0.0)
            self.assertLessEqual(gap, terminal_gap_threshold(problem, cfg, solution))
            self.assertLessEqual(gap, 1e-3)

    def test_viscous_coupled_game(self):
        sigma = 0.05
        problem = self._problem(
            running_cost=self.bump_cost, coupling=self.weak_coupling, sigma=sigma
        )
        solution = picard_solve(problem)
        self.assertTrue(solution.converged)
        path = solution.m
        self.assertEqual(path.sigma, sigma)
        np.testing.assert_allclose(path.mass, 1.0, atol=1e-8)
        self.assertEqual(path.clamp_correction, 0.0)
        first = positivity_report(path)
        self.assertIsNotNone(first)
        self.assertLessEqual(first, self.time.nt // 2)
        self.assertLessEqual(path.k_run, 2 * np.max(problem.m0().values))
        self.assertLessEqual(moment_report(path).k_constant, 1.0)
        self.assertLessEqual(time_holder_report(path).max_ratio, 1.0)
        self.assertLessEqual(lipschitz_report(solution.u).dx_ratio, 1.0)
        report = kkt_residuals(solution, problem)
        step = self.grid.dx + self.grid.dv + self.time.dt
        self.assertLessEqual(report.hjb_residual, 10 * step)
        self.assertLessEqual(report.max_weak, 10 * step)

    def test_not_converged_is_reported(self):
        problem = self._problem(running_cost=self.bump_cost, coupling=self.weak_coupling)
        solution = picard_solve(problem, IterationConfig(max_iters=1, tol_fp=1e-12))
        self.assertFalse(solution.converged)
        self.assertEqual(solution.iterations, 1)

    def test_variants(self):
        problem = self._problem(running_cost=self.bump_cost, coupling=self.weak_coupling)
        for cfg in (
            IterationConfig(fictitious_play=True, tol_fp=1e-3),
            IterationConfig(metric="l1", tol_fp=1e-3),
            IterationConfig(init="stationary", tol_fp=1e-3),
        ):
            solution = picard_solve(problem, cfg)
            self.assertTrue(solution.converged, cfg)


class TestKKT(common.CommonCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.problem = MFGProblem(
            grid=cls.grid,
            time=cls.time,
            running_cost=cls.bump_cost,
            coupling=cls.weak_coupling,
            initial_density=cls.density,
        )
        cls.solution = picard_solve(cls.problem)

    def test_residuals(self):
        report = kkt_residuals(self.solution, self.problem)
        step = self.grid.dx + self.grid.dv + self.time.dt
        self.assertLessEqual(report.hjb_residual, 10 * step)
        self.assertLessEqual(report.max_weak, 10 * step)
        self.assertEqual(len(report.weak_residuals), 5)

    def test_test_function_away_from_the_mass(self):
        report = kkt_residuals(self.solution, self.problem, {"far": _bump(-3.0, 2.4, 0.5)})
        self.assertLessEqual(report.weak_residuals["far"], 1e-10)

    def test_refinement(self):
        fine_problem = replace(
            self.problem,
            grid=PhaseGrid(-4.0, 4.0, -3.0, 3.0, 97, 97),
            time=TimeGrid(1.0, 200),
        )
        coarse = kkt_residuals(self.solution, self.problem)
        fine = kkt_residuals(picard_solve(fine_problem), fine_problem)
        self.assertLessEqual(fine.hjb_residual, 0.7 * coarse.hjb_residual)
        self.assertLessEqual(fine.max_weak, 0.7 * coarse.max_weak)


class TestReports(common.CommonCase):
    def test_viscosity_sweep(self):
        report = viscosity_sweep(self._problem(), (0.1, 0.05, 0.02))
        self.assertEqual([e.sigma for e in report.entries], [0.1, 0.05, 0.02])
        self.assertTrue(all(e.status == "ok" for e in report.entries))
        gaps = [e.value_gap for e in report.entries]
        self.assertTrue(gaps[0] > gaps[1] > gaps[2] > 0)
        self.assertTrue(report.gaps_decrease)
        self.assertLessEqual(report.semiconcavity_spread, 0.1)
        self.assertEqual(report.reference.sigma, 0.0)
        self.assertEqual(report.reference.status, "ok")
        spreads = report.constant_spreads
        self.assertEqual(sorted(spreads), sorted(UNIFORM_CONSTANTS))
        for name, spread in spreads.items():
            self.assertLessEqual(spread, UNIFORM_SPREAD, name)
        self.assertTrue(report.passed)

    def test_spread_leaves_out_large_sigma(self):
        entries = [
            SweepEntry(sigma=0.1, status="ok", moment_k=0.6, k_run=1.0, lipschitz_v=1.0, holder=0.2),
            SweepEntry(sigma=0.01, status="ok", moment_k=0.3, k_run=1.0, lipschitz_v=1.0, holder=0.1),
        ]
        reference = SweepEntry(
            sigma=0.0, status="ok", moment_k=0.3, k_run=1.0, lipschitz_v=1.0, holder=0.1
        )
        report = SweepReport(entries=entries, reference=reference)
        self.assertEqual(report.constant_spreads["moment_k"], 0.0)
        self.assertTrue(report.constants_stable)
        wide = SweepReport(entries=entries, reference=reference, uniform_sigma_max=0.1)
        self.assertAlmostEqual(wide.constant_spreads["moment_k"], 1.0 / 3.0)
        self.assertFalse(wide.constants_stable)

    def test_weak_coupling_sweep(self):
        problem = self._problem(running_cost=self.bump_cost, coupling=self.weak_coupling)
        report = viscosity_sweep(problem, (0.05, 0.02, 0.01), workers=2)
        self.assertTrue(all(e.status == "ok" for e in report.entries))
        gaps = [e.density_gap for e in report.entries]
        self.assertTrue(gaps[0] > gaps[1] > gaps[2] > 0, gaps)
        self.assertTrue(report.gaps_decrease)
        self.assertTrue(report.constants_stable, report.constant_spreads)

    def test_sweep_keeps_going_after_a_failure(self):
        report = viscosity_sweep(self._problem(), (0.05, 1.0), workers=2)
        statuses = {e.sigma: e.status for e in report.entries}
        self.assertEqual(statuses[0.05], "ok")
        self.assertEqual(statuses[1.0], "ValueError")
        self.assertIn("stable step", report.entries[1].error)
        self.assertFalse(report.passed)

    def test_uniqueness_monotone(self):
        coupling = CouplingSpec(kernel="self_convolution_gaussian", c_f=0.05)
        problem = self._problem(running_cost=self.bump_cost, coupling=coupling)
        report = uniqueness_probe(problem, workers=2)
        self.assertTrue(report.monotone)
        self.assertTrue(report.passed, report.counterexample)
        self.assertIsNone(report.counterexample)
        self.assertEqual(len(report.monotonicity), 6)
        self.assertGreaterEqual(min(report.monotonicity), -1e-12)
        self.assertTrue(report.d1_check.consistent)
        self.assertEqual(report.density_gap, report.d1_check.estimate)
        self.assertLessEqual(report.d1_check.exact, 1.0)

    def test_uniqueness_non_monotone_warns(self):
        problem = self._problem(running_cost=self.bump_cost, coupling=self.weak_coupling)
        with self.assertLogs("mfg_accel.mfg", level="WARNING") as logs:
            report = uniqueness_probe(problem)
        self.assertIn("non-monotone", "\n".join(logs.output))
        self.assertFalse(report.monotone)
