"""Hybrid transformer/CNN volumetric stereo matching with analysis tools."""

__version__ = "0.1.0"
