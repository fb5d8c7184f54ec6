"""Discrete latent spaces for cell-based neural architectures."""

__version__ = "0.1.0"
