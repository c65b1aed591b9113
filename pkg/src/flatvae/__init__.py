"""Flat-geometry negative-binomial VAE with latent OT flow matching."""

__version__ = "0.1.0"
