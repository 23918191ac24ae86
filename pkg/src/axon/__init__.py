"""Desk-scale coarse-to-fine diffusion pipeline: 2D radiographs to 3D CT volumes."""

__version__ = "0.1.0"
