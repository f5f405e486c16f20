"""Imitation learning by dataset aggregation, with exact tabular analysis tools."""

__version__ = "0.1.0"
