"""Spatio-temporal lattice graphs + pluggable GNNs for content-based video retrieval."""
__version__ = "0.1.0"
