"""Spectrum reconstruction, circuit simulation and fault diagnosis for CPV modules."""

__version__ = "0.1.0"
