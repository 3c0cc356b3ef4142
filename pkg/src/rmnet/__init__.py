"""Reverse-masking GAN inpainting: masks, networks, losses, training and metrics."""

__version__ = "0.1.0"

from .masking import apply_mask, composite, hole_ratio, masked_prediction, reverse_mask  # noqa: E402,F401
