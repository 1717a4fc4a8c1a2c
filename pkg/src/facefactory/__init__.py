"""Synthetic child-face dataset factory built on GAN latent editing."""

__version__ = "0.1.0"
