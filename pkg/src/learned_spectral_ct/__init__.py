"""Learned Spectral CT - unmixing and imaging for photon-counting CT."""

__version__ = "0.1.0"
