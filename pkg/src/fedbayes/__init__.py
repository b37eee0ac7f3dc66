"""Federated Bayesian MLPs with per-client meta-selected learning rates."""

__version__ = "0.1.0"
