"""Shape-preserving pathological lung synthesis and segmentation pipeline."""

__version__ = "0.1.0"
