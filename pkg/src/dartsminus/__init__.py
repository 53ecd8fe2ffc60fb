"""Differentiable architecture search with a decaying auxiliary skip connection."""

__version__ = "0.1.0"
