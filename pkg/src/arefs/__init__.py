"""Measure-preserving accelerating drifts for Langevin sampling."""

__version__ = "0.1.0"
