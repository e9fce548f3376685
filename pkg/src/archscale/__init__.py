"""Encoder-decoder architecture zoo with cost accounting and scaling analysis."""

__version__ = "0.1.0"
