"""Hierarchical retrieval-augmented report generation, desk scale."""

__version__ = "0.1.0"
