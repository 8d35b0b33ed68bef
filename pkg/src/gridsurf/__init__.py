"""Multi-resolution voxel-grid surface reconstruction from posed RGB-D."""

__version__ = "0.1.0"

from . import diffcore
from .diffcore import Tensor, grad, leaf, constant

__all__ = ["diffcore", "Tensor", "grad", "leaf", "constant", "__version__"]
