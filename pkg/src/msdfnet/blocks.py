"""Duplex fusion block, projection layer and duplex semantic aggregation head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import BNLayer, ParamStore, PreActConv
from .tensor import Tensor


@dataclass(frozen=True)
class DFBlockConfig:
    in_channels: int
    growth: int

    def __post_init__(self):
        if self.in_channels < 1 or self.growth < 1:
            raise ConfigError(f"DFBlock needs positive C and G, got C={self.in_channels}, G={self.growth}")

    @property
    def out_channels(self) -> int:
        # X (C) + X_r (G) + X_d (G + C); equals G + 3C when G == C
        return 2 * self.growth + 2 * self.in_channels


class DFBlock:
    """Residual-dense duplex fusion block.

    ``x1 = conv3_1(conv1_1(x))`` adds G channels.  ``concat(x, x1)`` is split
    into its first G channels (residual branch, additive skip) and its last C
    channels (dense branch, concatenative skip).  The block input and both
    branch outputs are concatenated and passed through BN -> ReLU.

    Every convolution is applied in pre-activation form (BN -> ReLU -> conv).
    """

    def __init__(self, store: ParamStore, name: str, config: DFBlockConfig):
        self.name = name
        self.config = config
        c, g = config.in_channels, config.growth
        self.conv1_1 = PreActConv(store, f"{name}.conv1_1", c, c)
        self.conv3_1 = PreActConv(store, f"{name}.conv3_1", c, g, kernel=3, padding=1)
        self.conv1_2 = PreActConv(store, f"{name}.conv1_2", g, g)
        self.conv1_3 = PreActConv(store, f"{name}.conv1_3", g, g)
        self.conv1_4 = PreActConv(store, f"{name}.conv1_4", c, c)
        self.conv1_5 = PreActConv(store, f"{name}.conv1_5", c, g)
        self.fuse = BNLayer(store, f"{name}.fuse", config.out_channels)

    def fusion_input(self, x: Tensor, training: bool) -> Tensor:
        """The concatenated (x, x_r, x_d) feature before the non-linear mapping."""
        c, g = self.config.in_channels, self.config.growth
        if x.c != c:
            raise ConfigError(f"{self.name}.conv1_1: expects {c} input channels, got {x.c}")
        x1 = self.conv3_1(self.conv1_1(x, training), training)
        x3, x4 = T.split_channels(T.concat_channels([x, x1]), [g, c])
        xr = T.add(x3, self.conv1_3(self.conv1_2(x3, training), training))
        xd = T.concat_channels([x4, self.conv1_5(self.conv1_4(x4, training), training)])
        return T.concat_channels([x, xr, xd])

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(self.fuse(self.fusion_input(x, training), training))


def df_block_forward(x: Tensor, block: DFBlock, training: bool) -> Tensor:
    return block(x, training)


class Projection:
    """Shape-preserving BN -> ReLU -> 1x1 conv bridge (bias suppressed)."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.name = name
        self.channels = channels
        self.layer = PreActConv(store, f"{name}", channels, channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.layer(x, training)


def projection_forward(x: Tensor, proj: Projection, training: bool) -> Tensor:
    return proj(x, training)


def _pool_logits(x: Tensor) -> Tensor:
    return T.flatten(T.global_avg_pool(x))


class DSAHead:
    """Two-branch classifier whose pooled class scores are summed.

    The normal branch is two 1x1 convs (C -> hidden -> K); the spatial branch
    is a 3x3 dilation-2 conv followed by a 1x1 conv.  Only the final,
    logit-producing convs carry a bias.
    """

    def __init__(self, store: ParamStore, name: str, in_channels: int, num_classes: int,
                 hidden: int):
        if hidden < 1 or num_classes < 1:
            raise ConfigError(f"{name}: hidden width and class count must be positive")
        self.name = name
        self.in_channels, self.num_classes, self.hidden = in_channels, num_classes, hidden
        self.normal1 = PreActConv(store, f"{name}.normal.conv1", in_channels, hidden)
        self.normal2 = PreActConv(store, f"{name}.normal.conv2", hidden, num_classes, bias=True)
        self.spatial1 = PreActConv(store, f"{name}.spatial.dilated", in_channels, hidden,
                                   kernel=3, padding=2, dilation=2)
        self.spatial2 = PreActConv(store, f"{name}.spatial.conv", hidden, num_classes, bias=True)

    def __call__(self, f: Tensor, training: bool, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        if f.c != self.in_channels:
            raise ConfigError(f"{self.name}: expects {self.in_channels} channels, got {f.c}")
        f = T.dropout(f, dropout_rate, training, rng)
        f1 = _pool_logits(self.normal2(self.normal1(f, training), training))
        f2 = _pool_logits(self.spatial2(self.spatial1(f, training), training))
        return f1, f2, T.add(f1, f2)


def dsa_forward(f: Tensor, head: DSAHead, training: bool, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None):
    return head(f, training, dropout_rate, rng)


class PlainHead:
    """Single-branch fallback: BN -> ReLU -> 1x1 conv to K, then global pooling."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, num_classes: int):
        self.name = name
        self.in_channels, self.num_classes = in_channels, num_classes
        self.classifier = PreActConv(store, f"{name}.classifier", in_channels, num_classes, bias=True)

    def __call__(self, f: Tensor, training: bool, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        if f.c != self.in_channels:
            raise ConfigError(f"{self.name}: expects {self.in_channels} channels, got {f.c}")
        f = T.dropout(f, dropout_rate, training, rng)
        logits = _pool_logits(self.classifier(f, training))
        return logits, logits, logits
