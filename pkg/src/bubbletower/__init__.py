"""Numerical laboratory for bubble towers of the fractional critical heat equation."""
__version__ = "0.1.0"
