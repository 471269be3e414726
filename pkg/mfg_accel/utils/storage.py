# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)

import contextlib
import json
import os
import time
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from .misc import to_jsonable

FLOAT_FORMAT = "%.17g"


def package_version():
    try:
        return metadata.version("mfg_accel")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    """Everything needed to audit a run, dumped as `manifest.json`.

    Each assertion records its measured value next to its threshold, so a
    reviewer sees by how much a check passed or failed.
    """

    study: str
    config: dict
    version: str = field(default_factory=package_version)
    wall_clock: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)
    fixture: dict = field(default_factory=dict)

    def check(self, name, value, threshold, op="<="):
        """Record the assertion `value <op> threshold` and return its outcome."""
        value = float(value)
        threshold = float(threshold)
        passed = {
            "<=": value <= threshold,
            ">=": value >= threshold,
            "==": value == threshold,
        }[op]
        self.assertions.append(
            {"name": name, "value": value, "threshold": threshold, "op": op, "passed": bool(passed)}
        )
        return passed

    @property
    def passed(self):
        return all(a["passed"] for a in self.assertions)

    @contextlib.contextmanager
    def timed(self, stage):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.wall_clock[stage] = time.perf_counter() - start

    def to_dict(self):
        return to_jsonable(
            {
                "study": self.study,
                "version": self.version,
                "config": self.config,
                "wall_clock": self.wall_clock,
                "constants": self.constants,
                "diagnostics": self.diagnostics,
                "assertions": self.assertions,
                "fixture": self.fixture,
                "passed": self.passed,
            }
        )


class ArtifactStorage:
    """Write the artifacts of a run under `out_dir`.

    Fields are CSV files `<name>_t<index>.csv` with the columns x, v, value;
    traces are CSV files `<name>.csv` with the columns t, value. Floats are
    written with 17 significant digits so that two runs of the same
    configuration produce identical files.
    """

    manifest_name = "manifest.json"

    def __init__(self, out_dir):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.written = []

    def _path(self, filename):
        path = os.path.join(self.out_dir, filename)
        self.written.append(path)
        return path

    def write_field(self, name, field_, index):
        X, V = field_.grid.mesh
        rows = np.column_stack([X.ravel(), V.ravel(), field_.values.ravel()])
        return self.write_rows(f"{name}_t{index}", ("x", "v", "value"), rows)

    def write_fields(self, name, path, indices):
        return [self.write_field(name, path[n], n) for n in indices]

    def write_trace(self, name, t, values):
        rows = np.column_stack([np.asarray(t, dtype=float), np.asarray(values, dtype=float)])
        return self.write_rows(name, ("t", "value"), rows)

    def write_rows(self, name, header, rows):
        path = self._path(f"{name}.csv")
        np.savetxt(
            path,
            np.asarray(rows, dtype=float),
            fmt=FLOAT_FORMAT,
            delimiter=",",
            header=",".join(header),
            comments="",
        )
        return path

    def write_manifest(self, manifest):
        path = self._path(self.manifest_name)
        with open(path, "w") as file_:
            json.dump(manifest.to_dict(), file_, indent=2, sort_keys=True)
            file_.write("\n")
        return path
