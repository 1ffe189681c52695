"""Convolutional LSTM sequence forecasting, baselines, and verification tools."""

__version__ = "0.1.0"
