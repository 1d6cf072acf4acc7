"""Sketch-guided inpainting of partially corrupted objects with a frozen latent denoiser."""

__version__ = "0.1.0"
