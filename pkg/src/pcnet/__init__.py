"""Predictive-corrective networks on synthetic linear dynamic systems."""

__version__ = "0.1.0"
