"""Diffusion-based test-time adaptation for 3D point clouds at desk scale."""

__version__ = "0.1.0"
