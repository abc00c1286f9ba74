"""Simulation-based inference for exponential random graph models."""

__version__ = "0.1.0"
