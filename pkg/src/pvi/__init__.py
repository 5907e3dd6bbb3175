"""Predictive variational inference: fit q(theta) so that its posterior
predictive maximizes a proper scoring rule on the observed data."""

__version__ = "0.1.0"
