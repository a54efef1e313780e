"""Multi-client split learning with differential privacy, on a small numpy engine."""

__version__ = "0.1.0"
