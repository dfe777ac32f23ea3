"""Recurrently stacked Transformer NMT toolkit."""

__version__ = "0.1.0"
