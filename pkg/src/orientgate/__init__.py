"""Orientation-gated action chunking: a planar mobile-manipulation analog with a from-scratch ACT policy."""

__version__ = "0.1.0"
