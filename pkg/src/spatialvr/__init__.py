"""Spatial vertical regression: Bayesian synthetic control with spatially
correlated regression weights, plus the comparison estimators and the
simulation study used to evaluate it."""

__version__ = "0.1.0"
