"""Diffusion-based long-term action anticipation."""

__version__ = "0.1.0"
