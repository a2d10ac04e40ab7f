"""Sparsely supervised collaborative object detection on synthetic bird's-eye-view scenes."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
