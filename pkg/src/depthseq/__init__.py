"""Depth-sequence transformer pipeline for slice-level landmark localisation."""

__version__ = "0.1.0"
