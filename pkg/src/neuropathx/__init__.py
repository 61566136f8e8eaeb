"""Pathway-guided cross-attention fusion of genetic pathway scores and ROI imaging features."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
