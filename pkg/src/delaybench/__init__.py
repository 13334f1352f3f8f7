"""Benchmark of regressors for predicting late assignment submissions."""

__version__ = "0.1.0"
