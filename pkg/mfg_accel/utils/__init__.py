__all__ = ["fixtures", "misc", "storage"]

from . import fixtures
from . import misc
from . import storage
