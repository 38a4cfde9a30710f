"""Decoupled spatial-temporal traffic forecasting."""

__version__ = "0.1.0"
