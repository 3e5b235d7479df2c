"""Desk-scale generative-model trainer for vein images."""

__version__ = "0.1.0"
