"""Segmentation of overlapping chromosome pairs with a small U-Net."""

__version__ = "0.1.0"
