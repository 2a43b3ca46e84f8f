"""Planted Bayesian inference models with Gaussian and exponential side channels,
and numerical checks of their replica identities and concentration bounds."""

__version__ = "0.1.0"
