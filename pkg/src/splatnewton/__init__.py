"""Gaussian splatting trained with per-attribute local Newton steps."""

__version__ = "0.1.0"
