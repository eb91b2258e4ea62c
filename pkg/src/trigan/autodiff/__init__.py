"""Minimal reverse-mode autodiff over float64 numpy arrays."""
from . import ops
from .gradcheck import gradcheck, numerical_grad, relative_error
from .kernels import BACKEND
from .ops import ShapeError, forward_primitive
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .tensor import Graph, Node, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "BACKEND",
    "Graph",
    "Node",
    "NonFiniteGradient",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "forward_primitive",
    "gradcheck",
    "is_grad_enabled",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
]
