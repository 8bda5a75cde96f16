"""Staggered-adoption difference-in-differences estimators and benchmark harness."""

__version__ = "0.1.0"
