"""Adaptive-length image tokenizer at desk scale."""

__version__ = "0.1.0"
