"""Autism classification from resting-state connectomes, with attribution benchmarking."""

__version__ = "0.1.0"
