"""Fusion-supervised deep cross-modal hashing."""

__version__ = "0.1.0"
