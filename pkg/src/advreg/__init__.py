"""Adversarial regularization of a question encoder against answer priors."""

__version__ = "0.1.0"
