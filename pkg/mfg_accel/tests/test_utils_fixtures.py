import os
from unittest import mock

from . import common

from mfg_accel.utils import fixtures


class TestFixtureStore(common.CommonCase):
    def setUp(self):
        super().setUp()
        app = self._create_app("solve_mfg", no_fixtures=False)
        self.store = fixtures.FixtureStoreFactory(app).build()
        self.store.clear()

    def tearDown(self):
        self.store.clear()

    def test_store_is_keyed_by_configuration(self):
        self.assertIsInstance(self.store, fixtures.FixtureStore)
        cache_dir = os.path.join(self.tmp_dir, "cache", "mfg-accel", "fixtures")
        self.assertEqual(str(self.store.dir_path), cache_dir)
        self.assertTrue(self.store.path.name.startswith("solve_mfg-"))
        other = self._create_app("solve_mfg", sigma=0.05, no_fixtures=False)
        self.assertNotEqual(fixtures.FixtureStoreFactory(other).build().path, self.store.path)

    def test_record_then_compare(self):
        history = [0.5, 0.1, 1e-5]
        self.assertIsNone(self.store.get_history())
        self.assertEqual(self.store.compare(history)["status"], "recorded")
        self.assertEqual(self.store.get_history(), history)
        result = self.store.compare(history)
        self.assertEqual(result["status"], "match")
        self.assertEqual(result["max_difference"], 0.0)

    def test_mismatch(self):
        self.store.compare([0.5, 0.1])
        result = self.store.compare([0.5, 0.2])
        self.assertEqual(result["status"], "mismatch")
        self.assertAlmostEqual(result["max_difference"], 0.1)
        result = self.store.compare([0.5, 0.1, 0.01])
        self.assertEqual(result["status"], "mismatch")
        self.assertEqual(result["recorded_iterations"], 2)

    def test_unwritable(self):
        with mock.patch.object(fixtures.FixtureStore, "record", side_effect=OSError):
            self.assertEqual(self.store.compare([0.5]), {"status": "unwritable"})


class TestFixtureStoreFactory(common.CommonCase):
    def test_disabled(self):
        app = self._create_app("solve_mfg", no_fixtures=True)
        store = fixtures.FixtureStoreFactory(app).build()
        self.assertIsInstance(store, fixtures.NoFixtures)
        self.assertEqual(store.compare([1.0]), {"status": "disabled"})

    def test_fallback_when_cache_is_unusable(self):
        app = self._create_app("solve_mfg", no_fixtures=False)
        with mock.patch.object(
            fixtures.FixtureStore, "__init__", side_effect=PermissionError
        ), self.assertLogs("mfg_accel.utils.fixtures", level="WARNING"):
            store = fixtures.FixtureStoreFactory(app).build()
        self.assertIsInstance(store, fixtures.NoFixtures)
