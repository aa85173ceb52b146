"""Fundamental music embedding and RIPO attention for symbolic melody modelling."""

__version__ = "0.1.0"
