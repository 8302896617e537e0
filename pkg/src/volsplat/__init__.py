"""Voxel-aligned feed-forward 3D Gaussian reconstruction engine."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
