"""Discrete-time survival modeling of daily departure times."""

__version__ = "0.1.0"
