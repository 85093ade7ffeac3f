"""Probabilistic fault localization for model verification and validation."""

__version__ = "0.1.0"
