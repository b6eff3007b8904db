"""Conditional servoing on a simulated shape-sorting task."""

__version__ = "0.1.0"
