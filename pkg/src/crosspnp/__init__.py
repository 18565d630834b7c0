"""Finite-element and finite-volume solvers for ion transport with volume
exclusion, plus the diagnostics used to compare them."""

__version__ = "0.1.0"
