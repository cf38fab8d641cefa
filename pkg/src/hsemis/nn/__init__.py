from . import functional
from .layers import (
    BatchNorm, Conv2d, ConvTranspose2d, Dense, InstanceNorm, Module, SeparableConv2d, lrelu,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor, as_tensor, concat, exp, leaky_relu, log, no_grad, relu, sigmoid, sqrt, stack, tanh,
)

__all__ = [
    "functional", "BatchNorm", "Conv2d", "ConvTranspose2d", "Dense", "InstanceNorm", "Module",
    "SeparableConv2d", "lrelu", "Adam", "AdamState", "adam_step", "Tensor", "as_tensor", "concat",
    "exp", "leaky_relu", "log", "no_grad", "relu", "sigmoid", "sqrt", "stack", "tanh",
]
