"""Classical feature path of a node: conv blocks, FC layers, projection, L2-tanh."""

from __future__ import annotations

import numpy as np

from ..errors import NormalizationError, ShapeError
from ..nn import functional as F
from ..nn.layers import BatchNorm, Conv2d, Dense, Module, he_uniform, zeros_param
from ..nn.tensor import Tensor, as_tensor, matmul, relu, sqrt, tanh, tsum

FILTERS = (32, 64, 128, 256, 512)


class FeatureBlock(Module):
    """conv 3x3 -> ReLU -> batch norm -> 2x2 max-pool.

    When the map is already 1 pixel wide the pool becomes a global average.
    """

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, k=3)
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        h = self.bn(relu(self.conv(x)))
        if h.shape[1] < 2 or h.shape[2] < 2:
            return F.global_avg_pool(h)
        return F.max_pool2d(h)


class BaseNetwork(Module):
    def __init__(self, rng: np.random.Generator, channels: int = 1, filters=FILTERS,
                 fc_dims=(1024, 512), proj_dim: int = 256):
        c_in = (channels,) + tuple(filters[:-1])
        self.blocks = [FeatureBlock(rng, a, b) for a, b in zip(c_in, filters)]
        self.fc1 = Dense(rng, filters[-1], fc_dims[0])
        self.fc2 = Dense(rng, fc_dims[0], fc_dims[1])
        self.proj_weight = he_uniform(rng, (proj_dim, fc_dims[1]), fc_dims[1])
        self.proj_bias = zeros_param((proj_dim,))

    @property
    def feature_dim(self) -> int:
        return self.fc2.weight.shape[1]

    def features(self, x) -> Tensor:
        """``[B, h, w, ch]`` -> ``F_base`` of shape ``[B, 512]``.

        The FC layers act on every spatial cell; global averaging follows.
        """
        h = as_tensor(x)
        for block in self.blocks:
            h = block(h)
        h = relu(self.fc1(h))
        h = relu(self.fc2(h))
        return h.mean(axis=(1, 2))

    def forward(self, x) -> Tensor:
        return project(self.features(x), self.proj_weight, self.proj_bias)


def base_forward(net: BaseNetwork, x) -> Tensor:
    return net.features(x)


def project(f_base, weight, bias) -> Tensor:
    """``F_t = W . F_base + b`` with ``W`` of shape ``[256, 512]``; accepts a batch of rows."""
    f_base, weight = as_tensor(f_base), as_tensor(weight)
    if f_base.shape[-1] != weight.shape[1]:
        raise ShapeError(f"projection expects length {weight.shape[1]}, got {f_base.shape[-1]}")
    return matmul(f_base, weight.T) + bias


def l2_tanh_normalize(f_t, omega: float = 1.0) -> Tensor:
    """``tanh(omega * F_t / ||F_t||_2)`` row-wise."""
    f_t = as_tensor(f_t)
    norms = np.linalg.norm(f_t.data, axis=-1)
    if np.any(norms == 0.0):
        raise NormalizationError("cannot L2-normalize a zero vector")
    norm = sqrt(tsum(f_t * f_t, axis=-1, keepdims=True))
    return tanh(f_t / norm * omega)
