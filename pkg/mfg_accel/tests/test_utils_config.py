import json
import os
import re

from . import common

from mfg_accel.exceptions import ConfigValueError
from mfg_accel.utils.config import (
    BASELINE_GRID,
    RunConfig,
    StudyConfig,
    config_from_dict,
    load_config,
)

CONFIGS_DIR = os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "configs")


class TestConfig(common.CommonCase):
    def test_defaults(self):
        config = config_from_dict({})
        self.assertEqual(config.problem.grid, BASELINE_GRID)
        self.assertEqual(config.problem.time.nt, 200)
        self.assertTrue(config.problem.coupling.decoupled)
        self.assertEqual(config.studies.sigmas, (0.1, 0.05, 0.02, 0.01))
        self.assertEqual(config.studies.n_starts, 20)
        self.assertEqual(config.problem.transport_scheme, "upwind")

    def test_partial_sections_keep_defaults(self):
        config = config_from_dict({"problem": {"grid": {"nx": 49}, "sigma": 0.05}})
        grid = config.problem.grid
        self.assertEqual((grid.nx, grid.nv), (49, 96))
        self.assertEqual(grid.x_min, -4.0)
        self.assertEqual(config.problem.sigma, 0.05)

    def test_unknown_keys(self):
        for data, key in (
            ({"problem": {"grid": {"foo": 1}}}, "problem.grid.foo"),
            ({"problem": {"bar": 1}}, "problem.bar"),
            ({"iteration": {"speed": 2}}, "iteration.speed"),
            ({"extra": {}}, "extra"),
        ):
            with self.assertRaisesRegex(ConfigValueError, f"unknown key '{key}'"):
                config_from_dict(data)

    def test_out_of_range(self):
        with self.assertRaisesRegex(ConfigValueError, "problem"):
            config_from_dict({"problem": {"sigma": -1.0}})
        with self.assertRaisesRegex(ConfigValueError, "iteration"):
            config_from_dict({"iteration": {"damping": 2.0}})
        with self.assertRaisesRegex(ConfigValueError, "studies"):
            config_from_dict({"studies": {"workers": 0}})
        with self.assertRaises(ConfigValueError):
            config_from_dict([])
        with self.assertRaisesRegex(ConfigValueError, "must be an object"):
            config_from_dict({"problem": {"grid": 3}})

    def test_load_errors(self):
        path = self._write_config('{\n  "problem": {,\n}')
        with self.assertRaisesRegex(ConfigValueError, rf"^{re.escape(path)}:2:\d+: "):
            load_config(path)
        with self.assertRaises(ConfigValueError):
            load_config(os.path.join(self.tmp_dir, "missing.json"))

    def test_shipped_configs(self):
        for name in sorted(os.listdir(CONFIGS_DIR)):
            config = load_config(os.path.join(CONFIGS_DIR, name))
            self.assertIsInstance(config, RunConfig, name)

    def test_scaled(self):
        config = RunConfig(problem=self._problem())
        self.assertIs(config.scaled(1), config)
        scaled = config.scaled(2)
        self.assertEqual(scaled.problem.grid.nx, 2 * self.grid.nx)
        self.assertEqual(scaled.problem.time.nt, 2 * self.time.nt)
        with self.assertRaises(ConfigValueError):
            config.scaled(0)

    def test_with_sigma(self):
        config = RunConfig(problem=self._problem())
        self.assertIs(config.with_sigma(None), config)
        self.assertEqual(config.with_sigma(0.05).problem.sigma, 0.05)
        with self.assertRaisesRegex(ConfigValueError, "stable step"):
            config.with_sigma(10.0)

    def test_echo_is_serializable(self):
        config = config_from_dict({"studies": {"sigmas": [0.1, 0.05]}})
        echo = json.loads(json.dumps(config.to_dict()))
        self.assertEqual(echo["studies"]["sigmas"], [0.1, 0.05])
        self.assertEqual(echo["problem"]["grid"]["nx"], 96)
        self.assertEqual(config_from_dict(echo), config)

    def test_study_config(self):
        with self.assertRaises(ValueError):
            StudyConfig(sigmas=(0.1, -0.1))
        self.assertEqual(StudyConfig(sigmas=[1, 0]).sigmas, (1.0, 0.0))

    def test_transport_scheme(self):
        config = config_from_dict({"problem": {"transport_scheme": "muscl"}})
        self.assertEqual(config.problem.transport_scheme, "muscl")
        with self.assertRaisesRegex(ConfigValueError, "transport scheme"):
            config_from_dict({"problem": {"transport_scheme": "weno"}})

    def test_pmp_config_starts(self):
        config = load_config(os.path.join(CONFIGS_DIR, "pmp.json"))
        self.assertEqual(config.studies.n_starts, 20)
