"""Classify-then-route blind deblurring for synthetic microscopy images."""

__version__ = "0.1.0"
