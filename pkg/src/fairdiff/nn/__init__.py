"""Minimal numpy neural-network engine with reverse-mode autodiff."""

from . import autograd, checkpoint
from .autograd import Parameter, ShapeError, Tensor, backward
from .layers import (
    Conv2d,
    Dense,
    Module,
    forward_conv2d,
    forward_dense,
    mse,
    sinusoidal_embed,
    zero_conv,
)
from .optim import Adam, NonFiniteGradient

__all__ = [
    "Adam",
    "Conv2d",
    "Dense",
    "Module",
    "NonFiniteGradient",
    "Parameter",
    "ShapeError",
    "Tensor",
    "autograd",
    "backward",
    "checkpoint",
    "forward_conv2d",
    "forward_dense",
    "mse",
    "sinusoidal_embed",
    "zero_conv",
]
