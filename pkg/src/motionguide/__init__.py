"""Attention-based motion cloning for a toy video diffusion model."""

__version__ = "0.1.0"
