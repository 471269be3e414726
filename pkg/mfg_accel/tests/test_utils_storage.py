import json
import os

import numpy as np

from . import common

from mfg_accel.model import FieldPath
from mfg_accel.utils.storage import ArtifactStorage, RunManifest


class TestRunManifest(common.CommonCase):
    def test_checks(self):
        manifest = RunManifest(study="solve_hjb", config={})
        self.assertTrue(manifest.passed)
        self.assertTrue(manifest.check("error", 0.01, 0.02))
        self.assertTrue(manifest.check("ratio", 2.0, 1.5, op=">="))
        self.assertFalse(manifest.check("flag", 0.0, 1.0, op="=="))
        self.assertFalse(manifest.passed)
        self.assertEqual(
            manifest.assertions[0],
            {"name": "error", "value": 0.01, "threshold": 0.02, "op": "<=", "passed": True},
        )

    def test_timed(self):
        manifest = RunManifest(study="solve_hjb", config={})
        with self.assertRaises(RuntimeError), manifest.timed("stage"):
            raise RuntimeError
        self.assertGreaterEqual(manifest.wall_clock["stage"], 0.0)

    def test_to_dict(self):
        manifest = RunManifest(study="solve_hjb", config={"sigma": np.float64(0.1)})
        manifest.diagnostics["history"] = np.array([1.0, 0.5])
        data = manifest.to_dict()
        self.assertEqual(data["config"], {"sigma": 0.1})
        self.assertEqual(data["diagnostics"]["history"], [1.0, 0.5])
        self.assertTrue(data["passed"])
        json.dumps(data)


class TestArtifactStorage(common.CommonCase):
    def setUp(self):
        super().setUp()
        self.storage = ArtifactStorage(os.path.join(self.tmp_dir, "artifacts"))

    def test_field(self):
        path = FieldPath.constant(self.time, self.density.on_grid(self.grid))
        written = self.storage.write_fields("m", path, [0, 50])
        self.assertEqual([os.path.basename(p) for p in written], ["m_t0.csv", "m_t50.csv"])
        data = np.loadtxt(written[1], delimiter=",", skiprows=1)
        self.assertEqual(data.shape, (self.grid.nx * self.grid.nv, 3))
        np.testing.assert_array_equal(data[:, 2].reshape(self.grid.shape), path.values[50])
        with open(written[0]) as file_:
            self.assertEqual(file_.readline().strip(), "x,v,value")

    def test_trace(self):
        written = self.storage.write_trace("mass", [0.0, 0.5], [1.0, 1.0 / 3.0])
        with open(written) as file_:
            lines = file_.read().splitlines()
        self.assertEqual(lines[0], "t,value")
        self.assertEqual(float(lines[2].split(",")[1]), 1.0 / 3.0)

    def test_manifest(self):
        manifest = RunManifest(study="solve_mfg", config={"b": 1, "a": 2})
        written = self.storage.write_manifest(manifest)
        self.assertEqual(os.path.basename(written), "manifest.json")
        with open(written) as file_:
            data = json.load(file_)
        self.assertEqual(data["study"], "solve_mfg")
        self.assertEqual(list(data["config"]), ["a", "b"])
        self.assertEqual(self.storage.written, [written])
