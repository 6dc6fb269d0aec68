"""Exemplar-free class-incremental learning with an adaptive prompt generator."""

__version__ = "0.1.0"
