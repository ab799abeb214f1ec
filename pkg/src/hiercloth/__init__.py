"""Cloth dynamics learned from an incremental potential, with hierarchical message passing."""

__version__ = "0.1.0"
