"""Semi-supervised blob segmentation with a mask-prior uncertainty scheme."""

__version__ = "0.1.0"

from .backend import backend_name

__all__ = ["backend_name", "__version__"]
