"""Masked-attention vision transformer laboratory."""

__version__ = "0.1.0"
