"""Inpainting-based coronary calcium removal on synthetic CT phantoms."""

from .backend import kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
