"""Centered reward distillation for small flow-matching models."""

__version__ = "0.1.0"
