"""Desk-scale transferable multi-modal sequential recommender."""

__version__ = "0.1.0"
