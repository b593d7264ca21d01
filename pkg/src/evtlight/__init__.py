"""Event-based structured light depth reconstruction."""

__version__ = "0.1.0"
