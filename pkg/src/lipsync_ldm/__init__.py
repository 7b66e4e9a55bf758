"""Desk-scale audio-conditioned latent-diffusion lip-sync stack."""

__version__ = "0.1.0"
