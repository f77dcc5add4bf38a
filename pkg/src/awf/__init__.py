"""Approximation-aware computational workflow engine."""

__version__ = "0.1.0"
