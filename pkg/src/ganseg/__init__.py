"""Desk-scale benchmark comparing generative (joint image/label GAN with
encoder inversion), supervised, and adversarially trained discriminative
segmentation on controllable synthetic chest-scan-like data."""

__version__ = "0.1.0"
