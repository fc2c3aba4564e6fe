"""Automatic fixed-point quantization schemes for time-stepped simulations."""

__version__ = "0.1.0"
