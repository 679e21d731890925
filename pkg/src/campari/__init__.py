"""Unsupervised camera-distribution learning for 3D-aware image synthesis."""

__version__ = "0.1.0"
