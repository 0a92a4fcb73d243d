"""Disentangled semantic image manipulation via scene graphs, at toy scale."""

__version__ = "0.1.0"
