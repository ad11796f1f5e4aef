"""Attention-map guided pruning of a small vision transformer."""

__version__ = "0.1.0"
