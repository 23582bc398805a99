"""Rotation, aggregation and model fitting of non-stationary multivariate return distributions."""

__version__ = "0.1.0"
