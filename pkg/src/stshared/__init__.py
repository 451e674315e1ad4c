"""Multivariate spatio-temporal disease mapping with flexible shared interactions."""

__version__ = "0.1.0"
