"""Desk-scale unified autoregressive + flow-matching multimodal model in numpy."""

__version__ = "0.1.0"
