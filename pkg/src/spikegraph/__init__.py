"""Spiking graph network engine for skeleton-based action recognition."""

from .tensor import (DimensionError, InvalidInputError, NumericalError,
                     Tape, Tensor, backward, grad_check)

__all__ = [
    "DimensionError",
    "InvalidInputError",
    "NumericalError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
