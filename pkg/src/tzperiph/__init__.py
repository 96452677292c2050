"""Simulator of a TrustZone-isolated I2S microphone and its partitioned driver."""

__version__ = "0.1.0"
