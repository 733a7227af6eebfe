"""Trace-driven video popularity prediction and top-k cache evaluation."""

__version__ = "0.1.0"
