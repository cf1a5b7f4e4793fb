"""Volumetric classification with anatomically paired channel cross-attention."""

from . import config
from .tensor import Tensor

__all__ = ["config", "Tensor"]
__version__ = "0.1.0"
