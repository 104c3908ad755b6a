"""Desk-scale image captioning with an explicit vision-to-text bridge."""

__version__ = "0.1.0"
