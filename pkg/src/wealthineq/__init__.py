"""Bayesian inequality indices from bracketed, non-rectangularly censored wealth surveys."""

__version__ = "0.1.0"
