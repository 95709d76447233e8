"""Adversarial denoise attacks: per-pixel kernel filtering that cleans an image
while steering a classifier to a wrong label."""

__version__ = "0.1.0"
