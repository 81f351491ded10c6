"""Desk-scale generative-supervised multimodal training."""

__version__ = "0.1.0"
