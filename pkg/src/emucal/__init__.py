"""Emulator-based Bayesian calibration of the two-scale Lorenz '96 system."""

__version__ = "0.1.0"
