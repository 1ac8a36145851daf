"""Conditional latent-diffusion radiotherapy dose prediction on synthetic phantoms."""

__version__ = "0.1.0"
