# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)

import hashlib
import json
import logging
import os
import pathlib

import numpy as np

from .misc import canonical_json

_logger = logging.getLogger(__name__)

FIXTURE_TOLERANCE = 1e-12


class FixtureStoreFactory:
    """Regression fixtures manager factory."""

    def __init__(self, app):
        self.app = app

    def build(self):
        """Build the fixtures manager."""
        if self.app.no_fixtures:
            return NoFixtures()
        try:
            store = FixtureStore(self.app.study, self.app.config.to_dict())
        except Exception:
            # If the cache folder can't be used we fallback on a fake store.
            _logger.warning(
                "No regression fixture will be used: "
                "unable to initialize the fixtures folder in %s.",
                FixtureStore._get_dir_path(),
            )
            store = NoFixtures()
        return store


class NoFixtures:
    """Fake fixtures manager, used with --no-fixtures or a read-only cache."""

    def __init__(self, *args, **kwargs):
        """Initialize a fake fixtures manager."""

    def compare(self, history):
        return {"status": "disabled"}

    def clear(self):
        pass


class FixtureStore:
    """Residual histories of passing runs, in respect to XDG conventions.

    One JSON file per (study, configuration): the key is a hash of the
    canonical configuration echo. The first passing run records its
    residual history, later runs are compared against it.
    """

    _cache_dirname = "mfg-accel"
    _fixtures_dirname = "fixtures"

    def __init__(self, study, config):
        self.dir_path = self._get_dir_path().joinpath(self._fixtures_dirname)
        self.dir_path.mkdir(parents=True, exist_ok=True)
        self._key = hashlib.shake_256(canonical_json(config).encode()).hexdigest(8)
        self.path = self.dir_path.joinpath(f"{study}-{self._key}.json")

    @classmethod
    def _get_dir_path(cls):
        """Return the path of the cache directory."""
        default_cache_dir_path = pathlib.Path.home().joinpath(".cache")
        return pathlib.Path(
            os.environ.get("XDG_CACHE_HOME", default_cache_dir_path), cls._cache_dirname
        )

    def get_history(self):
        """Return the recorded residual history, or None."""
        try:
            with self.path.open() as file_:
                return json.load(file_)["residual_history"]
        except (OSError, json.JSONDecodeError, KeyError):
            return None

    def record(self, history):
        with self.path.open(mode="w") as file_:
            json.dump({"residual_history": list(map(float, history))}, file_, indent=2)

    def compare(self, history):
        """Compare `history` with the fixture, recording it on first use."""
        recorded = self.get_history()
        if recorded is None:
            try:
                self.record(history)
            except OSError:
                return {"status": "unwritable"}
            return {"status": "recorded", "path": str(self.path)}
        if len(recorded) != len(history):
            return {
                "status": "mismatch",
                "path": str(self.path),
                "recorded_iterations": len(recorded),
                "iterations": len(history),
            }
        diff = float(np.max(np.abs(np.asarray(recorded) - np.asarray(history)), initial=0.0))
        return {
            "status": "match" if diff <= FIXTURE_TOLERANCE else "mismatch",
            "path": str(self.path),
            "max_difference": diff,
        }

    def clear(self):
        if self.path.exists():
            self.path.unlink()
