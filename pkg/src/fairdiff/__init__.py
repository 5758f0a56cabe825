"""Fairness-aware point-image diffusion toolkit."""

__version__ = "0.1.0"
