"""Ensemble Kalman inversion of elastic-rod parameters from image data."""

__version__ = "0.1.0"
