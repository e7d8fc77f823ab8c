"""Capacity-constrained variational models of conditional sequences."""

__version__ = "0.1.0"
