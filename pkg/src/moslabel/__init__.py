"""Automatic moving-object-segmentation labeling for multi-LiDAR sequences."""

__version__ = "0.1.0"
