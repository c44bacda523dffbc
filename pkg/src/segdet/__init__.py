"""Weakly supervised detection with a segmentation collaboration loop, at desk scale."""

__version__ = "0.1.0"
