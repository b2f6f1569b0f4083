"""Nonstationary latent Gaussian models on the sphere via a deformed SPDE."""

__version__ = "0.1.0"
