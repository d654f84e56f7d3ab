"""Bayesian nonparametric Poisson-process allocation for time-sequences."""
__version__ = "0.1.0"
