"""Dual receptive-field volumetric segmentation toolkit."""

__version__ = "0.1.0"
