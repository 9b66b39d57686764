"""Masked-autoencoder laboratory for multi-label radiograph classification."""

__version__ = "0.1.0"
