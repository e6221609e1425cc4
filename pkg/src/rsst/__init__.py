"""Robust semi-supervised temporal NIDS laboratory."""

__version__ = "0.1.0"
