"""Dual-incremental (class + orientation) learning with data-ensemble inference."""

__version__ = "0.1.0"
