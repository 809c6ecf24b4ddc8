"""Oriented 9-DoF anatomy boxes with index-aware set matching."""

__version__ = "0.1.0"
