"""Transformation-pooled convolution layers with hand-written gradients."""

__version__ = "0.1.0"
