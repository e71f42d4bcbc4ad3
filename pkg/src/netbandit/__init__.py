"""Adaptive treatment allocation on networks with unknown interference."""

__version__ = "0.1.0"
