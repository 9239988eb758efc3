"""Exact-enumeration laboratory for multi-turn policy optimization."""

__version__ = "0.1.0"
