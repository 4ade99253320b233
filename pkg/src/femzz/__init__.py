"""Adaptive finite elements for the heat equation with gradient-recovery estimators."""

__version__ = "0.1.0"
