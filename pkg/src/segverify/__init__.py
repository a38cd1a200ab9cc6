"""Segmentation verification by masked-boundary reconstruction and SSIM scoring."""

__version__ = "0.1.0"
