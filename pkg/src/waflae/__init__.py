"""Anomaly-detecting autoencoders trained by device-to-device model exchange."""

__version__ = "0.1.0"
