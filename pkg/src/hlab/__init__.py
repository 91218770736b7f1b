"""Numerical laboratory for Helmholtz equations with a variable index at infinity."""

__version__ = "0.1.0"
