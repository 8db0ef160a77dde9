"""Transformer NMT training kit with configurable normalization."""

__version__ = "0.1.0"
