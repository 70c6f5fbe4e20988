"""Layer vocabulary for the feature extractor, classifier and predictor.

Layers own their parameters (``Tensor`` leaves with ``requires_grad``) and,
for batch norm, running statistics.  ``layer(x, train)`` is the forward pass.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Layer:
    kind = "layer"

    def named_parameters(self, prefix=""):
        return []

    def named_buffers(self, prefix=""):
        return []

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _uniform(rng, (n_out,), n_in)

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]

    def __call__(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ContractError(f"linear expects (B, {self.n_in}), got {x.shape}")
        return x @ self.weight + self.bias


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, padding="same"):
        self.c_in, self.c_out, self.kernel, self.padding = c_in, c_out, kernel, padding
        self.weight = _uniform(rng, (c_out, c_in, kernel), c_in * kernel)
        self.bias = _uniform(rng, (c_out,), c_in * kernel)

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]

    def __call__(self, x, train=False):
        return nx.conv1d(x, self.weight, self.bias, self.padding)


class BatchNorm1d(Layer):
    """Per-channel batch norm over (batch, time); running stats with momentum 0.1."""

    kind = "batchnorm1d"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def named_parameters(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def __call__(self, x, train=False):
        if x.ndim == 3:
            axes, shape = (0, 2), (1, -1, 1)
        elif x.ndim == 2:
            axes, shape = (0,), (1, -1)
        else:
            raise ContractError(f"batchnorm expects 2-D or 3-D input, got {x.shape}")
        if x.shape[1] != self.channels:
            raise ContractError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        if train:
            mu = nx.mean(x, axis=axes, keepdims=True)
            centered = x - mu
            var = nx.mean(centered * centered, axis=axes, keepdims=True)
            n = x.data.size / self.channels
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var[:] = (1 - m) * self.running_var + m * unbiased
            xhat = centered / nx.sqrt(var + self.eps)
        else:
            xhat = (x - self.running_mean.reshape(shape)) / np.sqrt(self.running_var.reshape(shape) + self.eps)
        return xhat * nx.reshape(self.gamma, shape) + nx.reshape(self.beta, shape)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, train=False):
        return nx.relu(x)


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, kernel=4, stride=4):
        self.kernel, self.stride = kernel, stride

    def __call__(self, x, train=False):
        return nx.maxpool1d(x, self.kernel, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def __call__(self, x, train=False):
        return nx.reshape(x, (x.shape[0], -1))


class TemporalAttention(Layer):
    """Single-head scaled dot-product self-attention over the time axis, residual."""

    kind = "attention"

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.wq = _uniform(rng, (channels, channels), channels)
        self.wk = _uniform(rng, (channels, channels), channels)
        self.wv = _uniform(rng, (channels, channels), channels)

    def named_parameters(self, prefix=""):
        return [(prefix + "wq", self.wq), (prefix + "wk", self.wk), (prefix + "wv", self.wv)]

    def __call__(self, x, train=False):
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ContractError(f"attention expects (B, {self.channels}, L), got {x.shape}")
        xt = nx.transpose(x, (0, 2, 1))  # (B, L, C)
        q, k, v = xt @ self.wq, xt @ self.wk, xt @ self.wv
        scores = (q @ nx.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.channels))
        attended = nx.softmax(scores, axis=-1) @ v
        return nx.transpose(xt + attended, (0, 2, 1))


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        self.layers = list(layers)

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}{i}.{layer.kind}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_buffers(f"{prefix}{i}.{layer.kind}."))
        return out

    def __call__(self, x, train=False):
        for layer in self.layers:
            x = layer(x, train)
        return x


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus skip (1x1 conv when widths differ), relu, maxpool(4, 4)."""

    kind = "resblock"

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.body = Sequential([
            Conv1d(c_in, c_out, kernel, rng), BatchNorm1d(c_out), ReLU(),
            Conv1d(c_out, c_out, kernel, rng), BatchNorm1d(c_out),
        ])
        self.skip = Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None
        self.pool = MaxPool1d(4, 4)

    def named_parameters(self, prefix=""):
        out = self.body.named_parameters(prefix + "body.")
        if self.skip is not None:
            out += self.skip.named_parameters(prefix + "skip.")
        return out

    def named_buffers(self, prefix=""):
        return self.body.named_buffers(prefix + "body.")

    def __call__(self, x, train=False):
        shortcut = x if self.skip is None else self.skip(x, train)
        return self.pool(nx.relu(self.body(x, train) + shortcut), train)


def build_layer(spec: dict, rng: np.random.Generator, shape: tuple) -> tuple[Layer, tuple]:
    """Build one layer from a dict spec given the per-sample input ``shape``.

    Returns the layer and its per-sample output shape.
    """
    kind = spec.get("type")
    if kind == "conv1d":
        c, length = shape
        k = int(spec["kernel"])
        layer = Conv1d(c, int(spec["filters"]), k, rng, spec.get("padding", "same"))
        out_len = length if layer.padding == "same" else length - k + 1
        if out_len < 1:
            raise ConfigError("conv1d kernel longer than input")
        return layer, (layer.c_out, out_len)
    if kind == "batchnorm":
        return BatchNorm1d(shape[0]), shape
    if kind == "relu":
        return ReLU(), shape
    if kind == "maxpool":
        k, s = int(spec.get("kernel", 4)), int(spec.get("stride", 4))
        if shape[1] < k:
            raise ConfigError(f"maxpool kernel {k} exceeds temporal length {shape[1]}")
        return MaxPool1d(k, s), (shape[0], (shape[1] - k) // s + 1)
    if kind == "resblock":
        if shape[1] < 4:
            raise ConfigError("residual block pooling needs temporal length >= 4")
        return ResidualBlock(shape[0], int(spec["filters"]), int(spec["kernel"]), rng), (int(spec["filters"]), shape[1] // 4)
    if kind == "attention":
        return TemporalAttention(shape[0], rng), shape
    if kind == "flatten":
        return Flatten(), (int(np.prod(shape)),)
    if kind == "linear":
        if len(shape) != 1:
            raise ConfigError("linear layer needs a flattened input")
        return Linear(shape[0], int(spec["units"]), rng), (int(spec["units"]),)
    raise ConfigError(f"unknown layer type {kind!r}")


def apply_layer(layer: Layer, x: Tensor, train: bool = False) -> Tensor:
    return layer(nx.as_tensor(x), train)
