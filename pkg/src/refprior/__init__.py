"""Reflection-intensity prior based single-image reflection removal."""

__version__ = "0.1.0"
