"""Inception-ResNet-v2 fine-tuning kernel and experiment harness."""

__version__ = "0.1.0"
