"""Desk-scale GAN training with differentiable augmentations.

A from-scratch float32 autodiff engine, small conv generator/discriminator,
exactly-adjoint image augmentations, four training strategies, overfitting
diagnostics, and an experiment runner exposed through a CLI and a FastAPI
service.
"""

from .tensor import (
    GraphFreedError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    grad,
    graph_ops,
    no_grad,
    set_debug_checks,
)
from . import ops

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad",
    "graph_ops",
    "no_grad",
    "ops",
    "set_debug_checks",
    "ShapeError",
    "GraphFreedError",
    "NonFiniteError",
    "__version__",
]
