"""Numerical laboratory for the Berger plate with nonlinear boundary damping."""

__version__ = "0.1.0"
