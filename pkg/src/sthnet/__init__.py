"""Hybrid spatio-temporal convolution: operators, network, analysis, data."""

__version__ = "0.1.0"
