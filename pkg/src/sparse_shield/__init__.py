"""Sparse-recovery detector for backdoor triggers in images and latent features."""

__version__ = "0.1.0"
