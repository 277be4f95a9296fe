"""Shared-latent multimodal VAE with a conditional latent diffusion prior."""

__version__ = "0.1.0"
