"""Effective-parameter discovery from simulated model behavior."""

__version__ = "0.1.0"
