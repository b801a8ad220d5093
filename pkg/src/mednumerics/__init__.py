"""Numerical building blocks for medical image segmentation and weakly supervised detection."""

from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
