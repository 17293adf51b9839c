"""Bayesian travel-time tomography with sparse GMRF priors."""

__version__ = "0.1.0"
