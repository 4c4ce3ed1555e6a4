"""Desk-scale reference-conditioned defect generation pipeline."""

__version__ = "0.1.0"
