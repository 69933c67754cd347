"""Asymmetric generative recommendation: continuous inputs, hierarchical quantized targets."""

__version__ = "0.1.0"
