__all__ = ["App"]

from .app import App
