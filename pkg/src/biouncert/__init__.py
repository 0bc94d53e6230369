"""Propagating segmentation uncertainty into imaging-biomarker statistics."""

__version__ = "0.1.0"
