"""Evolutionary clustering of time-dependent densities via an EM-PDE scheme."""

__version__ = "0.1.0"
