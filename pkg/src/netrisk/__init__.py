"""Frequency-domain volatility connectedness, network risk factors and asset pricing tests."""

__version__ = "0.1.0"
