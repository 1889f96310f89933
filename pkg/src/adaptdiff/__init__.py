"""Diffusion-based unsupervised domain adaptation for vessel segmentation on phantoms."""

__version__ = "0.1.0"
