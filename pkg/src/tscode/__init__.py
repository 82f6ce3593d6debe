"""Desk-scale dense object detection lab with context-decoupled heads."""

__version__ = "0.1.0"

from .tensor import Tensor4, ConvParams  # noqa: F401
