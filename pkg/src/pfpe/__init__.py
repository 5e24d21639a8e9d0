"""Partially fitted policy evaluation on finite MDPs, with spectral stability diagnostics."""

__version__ = "0.1.0"
