"""Reverse-mode autodiff on numpy arrays."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .nn import ArchitectureMismatch, BatchNorm2d, Conv2d, ConvBlock, Linear, Module, Parameter
from .optim import Adam
from .tensor import (
    DiffArray,
    ShapeError,
    concat,
    exp,
    get_dtype,
    get_numeric_mode,
    log,
    numeric_mode,
    set_numeric_mode,
    sqrt,
    stack,
    tanh,
)

__all__ = [
    "Adam", "ArchitectureMismatch", "BatchNorm2d", "Conv2d", "ConvBlock", "DiffArray",
    "GradCheckReport", "Linear", "Module", "Parameter", "ShapeError", "concat", "exp",
    "functional", "get_dtype", "get_numeric_mode", "grad_check", "load_checkpoint", "log",
    "numeric_mode", "save_checkpoint", "set_numeric_mode", "sqrt", "stack", "tanh",
]
