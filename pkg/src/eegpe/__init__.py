"""Positional-encoding benchmark harness for a criss-cross EEG transformer."""

__version__ = "0.1.0"
