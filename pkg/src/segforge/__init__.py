"""Semantic segmentation from scratch: autograd tensors, UNet, losses, metrics, training."""

__version__ = "0.1.0"
