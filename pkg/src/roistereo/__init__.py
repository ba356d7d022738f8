"""Sparse temporal-stereo query generation for multi-camera 3D detection."""

__version__ = "0.1.0"
