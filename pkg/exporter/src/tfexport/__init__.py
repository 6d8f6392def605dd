"""Checkpoint exporter for the ternforge engine."""

__version__ = "0.1.0"
