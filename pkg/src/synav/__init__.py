"""Toy unified audio-video diffusion transformer with identity-bound rotary positions."""

__version__ = "0.1.0"

__all__ = ["__version__"]
