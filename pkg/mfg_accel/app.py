# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import hjb, mfg, particles, pmp, transport, utils
from .exceptions import ConfigValueError
from .model import FieldPath, LQOracle, instance_constants
from .utils.config import RunConfig, load_config
from .utils.misc import Output, bcolors as bc

_logger = logging.getLogger(__name__)

LQ_TOLERANCE = 0.02
PMP_VALUE_TOLERANCE = 0.02
PMP_FEEDBACK_TOLERANCE = 0.05
MASS_TOLERANCE = 1e-8
# first-order upwind transport smears the second moments by O(dx + dv)
PARTICLE_TOLERANCES = {"upwind": 0.15, "muscl": 0.05}


@dataclass
class App(Output):
    """'mfg-accel' application centralizing settings and studies.

    Parameters:

        study:
            name of the study to run, one of `App.studies`
        config:
            `RunConfig` instance (takes precedence over `config_path`)
        config_path:
            path of the JSON configuration file
        out_dir:
            directory receiving the CSV artifacts and `manifest.json`
        resolution_scale:
            multiply nx, nv and nt by this factor
        sigma:
            override the diffusion coefficient of the configuration
        quiet:
            only report warnings and errors
        no_fixtures:
            do not compare (nor record) the regression fixtures
    """

    study: str
    config: RunConfig = None
    config_path: str = None
    out_dir: str = "mfg-accel-out"
    resolution_scale: float = 1.0
    sigma: float = None
    quiet: bool = False
    no_fixtures: bool = False
    cli: bool = False  # Not documented, should not be used outside of the CLI

    studies = (
        "solve_hjb",
        "solve_mfg",
        "pmp_check",
        "particles_check",
        "viscosity_sweep",
        "uniqueness_probe",
    )

    def __post_init__(self):
        self.study = self.study.replace("-", "_")
        if self.study not in self.studies:
            raise ConfigValueError(
                f"Unknown study '{self.study}', expected one of {', '.join(self.studies)}."
            )
        if self.config is None:
            self.config = load_config(self.config_path) if self.config_path else RunConfig()
        if self.sigma is not None and self.sigma < 0:
            raise ConfigValueError("sigma must be nonnegative.")
        self.config = self.config.scaled(self.resolution_scale).with_sigma(self.sigma)
        self.problem = self.config.problem
        self.storage = utils.storage.ArtifactStorage(self.out_dir)
        self.fixtures = utils.fixtures.FixtureStoreFactory(self).build()
        self.manifest = utils.storage.RunManifest(study=self.study, config=self.config.to_dict())
        problem = self.problem
        self.manifest.constants = vars(
            instance_constants(
                problem.grid, problem.running_cost, problem.terminal_cost, problem.coupling
            )
        ).copy()

    @property
    def checkpoints(self):
        return self.problem.time.checkpoints(5)

    def run(self):
        """Run the study, write its artifacts and return the manifest."""
        grid, time = self.problem.grid, self.problem.time
        self._print(
            f"{bc.BOLD}{self.study}{bc.END} on a {grid.nx}x{grid.nv} grid, {time.nt} time steps"
        )
        try:
            with self.manifest.timed("total"):
                getattr(self, f"run_{self.study}")()
        finally:
            self.storage.write_manifest(self.manifest)
        for check in self.manifest.assertions:
            self._print_check(check)
        return self.manifest

    # Studies

    def _hjb_diagnostics(self, sol, cost, prefix="hjb"):
        manifest = self.manifest
        bounds = hjb.check_value_bounds(sol, cost)
        lip = hjb.lipschitz_report(sol)
        manifest.diagnostics[f"{prefix}_bounds"] = {
            "lower_margin": bounds.lower_margin,
            "upper_margin": bounds.upper_margin,
            "violations": bounds.violations,
        }
        manifest.diagnostics[f"{prefix}_lipschitz"] = vars(lip)
        manifest.diagnostics[f"{prefix}_semiconcavity"] = hjb.semiconcavity_report(sol)
        manifest.diagnostics[f"{prefix}_cfl_margin"] = sol.cfl_margin
        manifest.check(f"{prefix}_bound_violations", len(bounds.violations), 0)
        return bounds

    def _write_value(self, sol):
        indices = self.checkpoints
        self.storage.write_fields("u", sol.u, indices)
        self.storage.write_fields("dxu", sol.dxu, indices)
        self.storage.write_fields("dvu", sol.dvu, indices)

    def _is_lq(self):
        problem = self.problem
        return (
            problem.running_cost.kind == "zero"
            and problem.terminal_cost.kind == "zero"
            and problem.coupling.decoupled
        )

    def _lq_error(self, sol):
        time, grid = sol.time, sol.grid
        X, V = grid.mesh
        oracle = LQOracle(time.horizon)
        exact = np.stack([oracle.value(X, V, t) for t in time.t])
        return float(np.max(np.abs(sol.u.values - exact)[:, grid.inner_mask]))

    def run_solve_hjb(self):
        """Solve the HJB equation with the measure frozen at m0."""
        problem = self.problem
        m_path = None
        if not problem.coupling.decoupled:
            m_path = FieldPath.constant(problem.time, problem.m0())
        with self.manifest.timed("hjb"):
            sol, cost = problem.solve_hjb(m_path)
        self._hjb_diagnostics(sol, cost)
        times = [problem.time.t[n] for n in self.checkpoints[:-1]]
        samples = [(0.0, v, t) for v in (-1.0, 0.0, 1.0) for t in times]
        dpp = hjb.dpp_consistency(sol, cost, samples)
        self.manifest.diagnostics["dpp_residual"] = dpp.max_residual
        if self._is_lq():
            error = self._lq_error(sol)
            self.manifest.diagnostics["lq_error"] = error
            self.manifest.check("lq_error", error, LQ_TOLERANCE)
            with self.manifest.timed("hjb_refined"):
                fine = replace(problem, grid=problem.grid.scaled(2), time=problem.time.scaled(2))
                fine_sol, _ = fine.solve_hjb(None)
            fine_error = self._lq_error(fine_sol)
            self.manifest.diagnostics["lq_error_refined"] = fine_error
            ratio = error / max(fine_error, 1e-300)
            self.manifest.check("lq_convergence_ratio", ratio, 1.5, op=">=")
        self._write_value(sol)

    def _transport_diagnostics(self, path):
        manifest = self.manifest
        mass_error = float(np.max(np.abs(path.mass - 1.0)))
        manifest.diagnostics["mass_error"] = mass_error
        manifest.diagnostics["min_density"] = path.min_value
        manifest.diagnostics["clamp_correction"] = path.clamp_correction
        manifest.diagnostics["boundary_mass"] = path.leakage
        manifest.diagnostics["k_run"] = path.k_run
        moments = transport.moment_report(path)
        manifest.diagnostics["second_moment_k"] = moments.k_constant
        holder = transport.time_holder_report(path)
        manifest.diagnostics["time_holder_ratio"] = holder.max_ratio
        manifest.check("mass_conservation", mass_error, MASS_TOLERANCE)
        manifest.check("min_density", path.min_value, -1e-12, op=">=")
        if path.sigma > 0:
            first = transport.positivity_report(path)
            manifest.diagnostics["positive_from_slice"] = first
            manifest.check(
                "positivity_at_half_horizon",
                path.time.nt + 1 if first is None else first,
                path.time.nt // 2,
            )

    def _solve_game(self):
        with self.manifest.timed("picard"):
            solution = mfg.picard_solve(self.problem, self.config.iteration)
        manifest = self.manifest
        manifest.diagnostics["iterations"] = solution.iterations
        manifest.diagnostics["residual_history"] = solution.residual_history
        manifest.diagnostics["l1_history"] = solution.l1_history
        manifest.diagnostics["terminal_coupling_gap"] = solution.terminal_coupling_gap
        manifest.check("picard_residual", solution.residual_history[-1], self.config.iteration.tol_fp)
        manifest.check(
            "terminal_coupling_gap",
            solution.terminal_coupling_gap,
            mfg.terminal_gap_threshold(self.problem, self.config.iteration, solution),
        )
        return solution

    def _d1_check(self, prefix, check):
        manifest = self.manifest
        manifest.diagnostics[f"{prefix}_d1_estimate"] = check.estimate
        manifest.diagnostics[f"{prefix}_d1_exact"] = check.exact
        manifest.check(f"{prefix}_d1_below_exact", check.estimate, check.exact + check.tolerance)

    def run_solve_mfg(self):
        """Solve the coupled system by damped fixed point."""
        solution = self._solve_game()
        problem = self.problem
        self._hjb_diagnostics(solution.u, solution.cost)
        self._transport_diagnostics(solution.m)
        kkt = mfg.kkt_residuals(solution, problem)
        grid, time = problem.grid, problem.time
        step = grid.dx + grid.dv + time.dt
        self.manifest.diagnostics["kkt_hjb_residual"] = kkt.hjb_residual
        self.manifest.diagnostics["kkt_weak_residuals"] = kkt.weak_residuals
        self.manifest.check("kkt_hjb_residual", kkt.hjb_residual, 10 * step)
        self.manifest.check("kkt_weak_residual", kkt.max_weak, 10 * step)
        pairs = ((solution.m.m[n], solution.iterate[n]) for n in self.checkpoints)
        self._d1_check("fixed_point", transport.d1_cross_check(pairs))
        self._write_value(solution.u)
        self.storage.write_fields("m", solution.m.m, self.checkpoints)
        self.storage.write_trace("mass", time.t, solution.m.mass)
        self.storage.write_trace("second_moment", time.t, solution.m.second_moment)
        history = solution.residual_history
        self.storage.write_trace("residual_history", np.arange(1, len(history) + 1), history)
        self._compare_fixture(history)

    def _compare_fixture(self, history):
        if not self.manifest.passed:
            return
        result = self.fixtures.compare(history)
        self.manifest.fixture = result
        if result["status"] == "mismatch":
            self.manifest.check("fixture_difference", result.get("max_difference", np.inf), 1e-12)

    def _start_points(self):
        studies, grid = self.config.studies, self.problem.grid
        rng = np.random.default_rng(studies.seed)
        xc, vc = 0.5 * (grid.x_min + grid.x_max), 0.5 * (grid.v_min + grid.v_max)
        # keep the starts well inside the inner half-box
        half_x, half_v = 0.125 * (grid.x_max - grid.x_min), 0.125 * (grid.v_max - grid.v_min)
        xs = rng.uniform(xc - half_x, xc + half_x, studies.n_starts)
        vs = rng.uniform(vc - half_v, vc + half_v, studies.n_starts)
        return list(zip(xs.tolist(), vs.tolist()))

    def run_pmp_check(self):
        """Compare the Pontryagin shooting with the HJB value at sampled starts."""
        problem = self.problem
        if problem.sigma > 0:
            raise ConfigValueError("pmp-check requires sigma = 0.")
        m_path = None
        if not problem.coupling.decoupled:
            m_path = FieldPath.constant(problem.time, problem.m0())
        with self.manifest.timed("hjb"):
            sol, cost = problem.solve_hjb(m_path)
        sampler = pmp.CostSampler(cost)
        starts = self._start_points()
        segments = self.config.studies.segments

        def run(start):
            return pmp.shoot(sampler, start[0], start[1], sol=sol, segments=segments)

        with self.manifest.timed("shooting"):
            workers = self.config.studies.workers
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    trajectories = list(pool.map(run, starts))
            else:
                trajectories = [run(start) for start in starts]
        value_gaps, feedback = [], []
        for k, traj in enumerate(trajectories):
            x0, v0, t0 = traj.start
            value_gaps.append(abs(traj.cost - float(sol.value_at(x0, v0, t0))))
            feedback.append(pmp.feedback_residual(traj, sol))
            self.storage.write_rows(
                f"pmp_trajectory_{k}", ("s", "x", "v", "p_x", "p_v", "alpha"), traj.to_rows()
            )
        growth = pmp.growth_check(trajectories)
        manifest = self.manifest
        manifest.diagnostics["pmp_starts"] = starts
        manifest.diagnostics["pmp_value_gaps"] = value_gaps
        manifest.diagnostics["pmp_feedback_residuals"] = feedback
        manifest.diagnostics["pmp_iterations"] = [t.iterations for t in trajectories]
        manifest.diagnostics["growth_constants"] = growth.constants
        manifest.diagnostics["growth_c_run"] = growth.c_run
        manifest.check("pmp_converged", sum(not t.converged for t in trajectories), 0)
        manifest.check("pmp_value_gap", max(value_gaps), PMP_VALUE_TOLERANCE)
        manifest.check("pmp_feedback_residual", max(feedback), PMP_FEEDBACK_TOLERANCE)
        manifest.check("pmp_max_condition", max(pmp.max_condition_gap(t) for t in trajectories), 1e-8)

    def run_particles_check(self):
        """Compare a particle cloud moved by the optimal feedback with the density."""
        solution = self._solve_game()
        problem = self.problem
        ensemble = particles.sample_from_density(problem.m0(), self.config.studies.n_particles)
        with self.manifest.timed("particles"):
            trajectories = particles.advect(ensemble, solution.u.dvu)
        report = particles.representation_check(trajectories, solution.m, checkpoints=self.checkpoints)
        manifest = self.manifest
        manifest.diagnostics["n_particles"] = len(ensemble)
        manifest.diagnostics["representation"] = report.rows
        manifest.check("particles_mass", report.max_abs("1"), 1e-8)
        manifest.check(
            "particles_second_order", report.max_rel(), PARTICLE_TOLERANCES[problem.transport_scheme]
        )
        rows = []
        for n in self.checkpoints:
            t = problem.time.t[n]
            rows.append(
                np.column_stack(
                    [
                        np.arange(len(ensemble)),
                        np.full(len(ensemble), t),
                        trajectories.x[n],
                        trajectories.v[n],
                        trajectories.w,
                    ]
                )
            )
        self.storage.write_rows("particles", ("id", "t", "x", "v", "w"), np.vstack(rows))

    def run_viscosity_sweep(self):
        """Solve the game for decreasing sigma and compare with sigma = 0."""
        studies = self.config.studies
        with self.manifest.timed("sweep"):
            report = mfg.viscosity_sweep(
                self.problem, studies.sigmas, self.config.iteration, workers=studies.workers
            )
        manifest = self.manifest
        manifest.diagnostics["sweep"] = [vars(e) for e in report.entries]
        manifest.check("sweep_failed_runs", sum(e.status != "ok" for e in report.entries), 0)
        manifest.check("sweep_gaps_decrease", float(report.gaps_decrease), 1.0, op="==")
        manifest.check("sweep_semiconcavity_spread", report.semiconcavity_spread, 0.1)
        manifest.diagnostics["sweep_reference"] = vars(report.reference)
        manifest.diagnostics["sweep_uniform_sigma_max"] = report.uniform_sigma_max
        for name, spread in report.constant_spreads.items():
            manifest.check(f"sweep_{name}_spread", spread, mfg.UNIFORM_SPREAD)
        columns = ("sigma", "value_gap", "density_gap") + mfg.UNIFORM_CONSTANTS
        rows = [[getattr(e, name) for name in columns] for e in [report.reference] + report.entries]
        self.storage.write_rows("viscosity_sweep", columns, rows)

    def run_uniqueness_probe(self):
        """Solve the game from two starts and compare the limits."""
        studies = self.config.studies
        with self.manifest.timed("probe"):
            report = mfg.uniqueness_probe(self.problem, self.config.iteration, workers=studies.workers)
        manifest = self.manifest
        manifest.diagnostics["monotone_coupling"] = report.monotone
        manifest.diagnostics["monotonicity_integrals"] = report.monotonicity
        manifest.diagnostics["counterexample"] = report.counterexample
        manifest.check("uniqueness_converged", float(report.converged), 1.0, op="==")
        manifest.check("uniqueness_density_gap", report.density_gap, report.threshold)
        self._d1_check("uniqueness", report.d1_check)
        manifest.check("uniqueness_value_gap", report.value_gap, report.value_threshold)
        manifest.check("uniqueness_monotonicity", min(report.monotonicity, default=0.0), -1e-12, op=">=")
