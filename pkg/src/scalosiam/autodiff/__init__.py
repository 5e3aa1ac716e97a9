"""Minimal reverse-mode autodiff engine for the Siamese models."""
from .tensor import Tensor, as_tensor
from .ops import (
    absolute,
    activation,
    add,
    bce_loss,
    concat,
    conv2d,
    dense,
    dropout,
    flatten,
    maxpool2,
    relu,
    reshape,
    sigmoid,
    sub,
    take,
    total,
)
from .optim import AdamState, adam_step
from .gradcheck import grad_check, relative_error
from . import checkpoint

__all__ = [
    "Tensor",
    "as_tensor",
    "absolute",
    "activation",
    "add",
    "bce_loss",
    "concat",
    "conv2d",
    "dense",
    "dropout",
    "flatten",
    "maxpool2",
    "relu",
    "reshape",
    "sigmoid",
    "sub",
    "take",
    "total",
    "AdamState",
    "adam_step",
    "grad_check",
    "relative_error",
    "checkpoint",
]
