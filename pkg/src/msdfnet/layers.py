"""Parametric layers and the named parameter store they register into."""
from __future__ import annotations

import re
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

_NAME_RE = re.compile(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*$")


class ParamStore:
    """Ordered mapping of hierarchical names to learnable tensors.

    Running statistics of batch-norm layers live in ``buffers``: they are
    saved with the weights but are not counted as parameters.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _claim(self, name: str):
        if not _NAME_RE.match(name):
            raise ConfigError(f"invalid parameter name {name!r}")
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate parameter name {name!r}")

    def add_param(self, name: str, shape: tuple[int, ...]) -> Tensor:
        self._claim(name)
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._claim(name)
        buf = np.array(value, dtype=T.get_dtype())
        self.buffers[name] = buf
        return buf

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.params.items():
            if name.startswith(prefix):
                yield name, t

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name: str):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]


class ConvLayer:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: int = 1, stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = True):
        if min(in_channels, out_channels, kernel, stride, dilation) < 1 or padding < 0:
            raise ConfigError(f"{name}: invalid conv geometry "
                              f"({in_channels}->{out_channels}, k={kernel}, s={stride}, p={padding}, d={dilation})")
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.dilation = kernel, stride, padding, dilation
        self.weight = store.add_param(f"{name}.weight", (out_channels, in_channels, kernel, kernel))
        self.bias = store.add_param(f"{name}.bias", (out_channels,)) if bias else None

    @property
    def parameter_count(self) -> int:
        n = self.weight.data.size
        return n + (self.bias.data.size if self.bias is not None else 0)

    def __call__(self, x: Tensor) -> Tensor:
        if x.c != self.in_channels:
            raise ConfigError(f"{self.name}: expects {self.in_channels} input channels, got {x.c}")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


def conv_forward(layer: ConvLayer, x: Tensor) -> Tensor:
    return layer(x)


class BNLayer:
    def __init__(self, store: ParamStore, name: str, channels: int,
                 momentum: float = 0.1, epsilon: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum, self.epsilon = momentum, epsilon
        self.gamma = store.add_param(f"{name}.gamma", (channels,))
        self.beta = store.add_param(f"{name}.beta", (channels,))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))

    @property
    def parameter_count(self) -> int:
        return 2 * self.channels

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.c != self.channels:
            raise ConfigError(f"{self.name}: expects {self.channels} channels, got {x.c}")
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.momentum, self.epsilon, training)


def bn_relu_conv(x: Tensor, bn: BNLayer, conv: ConvLayer, training: bool) -> Tensor:
    return conv(T.relu(bn(x, training)))


class PreActConv:
    """BN -> ReLU -> conv, registered as ``<name>.bn`` and ``<name>.conv``."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: int = 1, padding: int = 0, dilation: int = 1, bias: bool = False):
        self.name = name
        self.bn = BNLayer(store, f"{name}.bn", in_channels)
        self.conv = ConvLayer(store, f"{name}.conv", in_channels, out_channels, kernel,
                              padding=padding, dilation=dilation, bias=bias)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.c != self.bn.channels:
            raise ConfigError(f"{self.name}: expects {self.bn.channels} input channels, got {x.c}")
        return bn_relu_conv(x, self.bn, self.conv, training)


def init_weights(store: ParamStore, seed: int):
    """Kaiming-normal conv kernels, zero biases, unit BN scale, fresh running stats.

    Draws happen in store order from a single generator, so a given seed
    always yields the same weights.
    """
    rng = np.random.default_rng(seed)
    for name, t in store.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = int(np.prod(t.shape[1:]))
            t.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=t.shape)
        elif leaf == "gamma":
            t.data[...] = 1
        elif leaf in ("bias", "beta"):
            t.data[...] = 0
        else:
            raise ConfigError(f"no init rule for parameter {name!r}")
        t.grad = None
    for name, buf in store.buffers.items():
        buf[...] = 1 if name.endswith("running_var") else 0


def count_params(store: ParamStore, prefix: str = "") -> int:
    return sum(t.data.size for _, t in store.named_parameters(prefix))
