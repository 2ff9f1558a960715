"""Numerical laboratory for wave propagation and spectral statistics on hyperbolic surfaces."""

__version__ = "0.1.0"
