"""Differentially private graph generation from edge lists."""

__version__ = "0.1.0"
