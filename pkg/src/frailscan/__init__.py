"""Spatial scan statistics for right-censored survival data with CAR shared frailties."""

__version__ = "0.1.0"
