"""Rogue emitter detection with a denoising autoencoder and center-loss features."""

__version__ = "0.1.0"
