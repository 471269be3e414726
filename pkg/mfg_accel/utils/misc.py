# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)

import json

import numpy as np


class bcolors:
    HEADER = "\033[95m"
    OKBLUE = "\033[94m"
    OKCYAN = "\033[96m"
    OKGREEN = "\033[92m"
    WARNING = "\033[93m"
    FAIL = "\033[91m"
    ENDC = "\033[39m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    ENDD = "\033[22m"
    END = "\033[0m"


class Output:
    """Mixin to handle the output of mfg-accel."""

    def _print(self, *args, **kwargs):
        """Like built-in 'print' method but check if mfg-accel is used in CLI."""
        app = self
        if hasattr(self, "app"):
            app = self.app
        if app.cli and not app.quiet:
            print(*args, **kwargs)

    def _print_check(self, check):
        """Print one assertion of the run manifest."""
        color = bcolors.OKGREEN if check["passed"] else bcolors.FAIL
        status = "ok" if check["passed"] else "FAILED"
        self._print(
            f"\t{check['name']}: {check['value']:.6g} "
            f"(threshold {check['threshold']:.6g}) "
            f"{color}{status}{bcolors.ENDC}"
        )


def relative_spread(values):
    """Half-width of the range of `values` relative to its midpoint.

    >>> relative_spread([1.0, 3.0])
    0.5
    """
    values = np.asarray([v for v in values if v is not None], dtype=float)
    if values.size == 0:
        return 0.0
    lo, hi = float(values.min()), float(values.max())
    if hi + lo == 0:
        return 0.0
    return (hi - lo) / abs(hi + lo)


def non_increasing(values, slack=0.1):
    """True if each value is at most (1 + slack) times the previous one."""
    return all(b <= (1 + slack) * a + 1e-15 for a, b in zip(values, values[1:]))


def to_jsonable(obj):
    """Convert numpy scalars and arrays found in `obj` to plain Python."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(data):
    """Serialize `data` deterministically (sorted keys, no whitespace)."""
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(",", ":"))
