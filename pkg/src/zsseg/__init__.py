"""Generative zero-shot point cloud segmentation at toy scale."""

__version__ = "0.1.0"
