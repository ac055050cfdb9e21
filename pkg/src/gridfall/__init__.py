"""Regression-based DER fallback control trained from OPF sweeps."""

__version__ = "0.1.0"
