"""Persistent-query long-horizon tracking: model, simulator, metrics, CLI."""

__version__ = "0.1.0"
