"""Parameterized layers built on the functional primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, leaky_relu, relu

LEAKY_SLOPE = 0.2


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Dense(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = he_uniform(rng, (n_in, n_out), n_in)
        self.bias = zeros_param((n_out,))

    def forward(self, x):
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None):
        self.weight = he_uniform(rng, (k, k, c_in, c_out), k * k * c_in)
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class SeparableConv2d(Module):
    """Depthwise k x k followed by pointwise 1 x 1."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        self.depthwise = he_uniform(rng, (k, k, c_in), k * k)
        self.pointwise = he_uniform(rng, (1, 1, c_in, c_out), c_in)
        self.bias = zeros_param((c_out,))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        h = F.depthwise_conv2d(x, self.depthwise, self.stride, self.padding)
        return F.conv2d(h, self.pointwise, self.bias)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 2, stride: int = 2):
        self.weight = he_uniform(rng, (k, k, c_in, c_out), c_in)
        self.bias = zeros_param((c_out,))
        self.stride = stride

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param((channels,))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param((channels,))
        self.eps = eps

    def forward(self, x):
        return F.instance_norm(x, self.gamma, self.beta, self.eps)


def lrelu(x):
    return leaky_relu(x, LEAKY_SLOPE)


__all__ = [
    "Module", "Dense", "Conv2d", "SeparableConv2d", "ConvTranspose2d", "BatchNorm",
    "InstanceNorm", "he_uniform", "zeros_param", "relu", "lrelu", "LEAKY_SLOPE",
]
