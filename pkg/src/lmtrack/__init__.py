"""Tracking-by-attention with latent motion models on synthetic 3D scenes."""

__version__ = "0.1.0"
