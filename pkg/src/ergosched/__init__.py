"""Desk-scale fatigue-constrained human-robot task planning toolkit."""

__version__ = "0.1.0"
