"""Full network assembly, parameter accounting and the weight file format."""
from __future__ import annotations

import dataclasses
import io
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import DFBlock, DFBlockConfig, DSAHead, PlainHead, Projection
from .config import ModelConfig
from .errors import (BadMagicError, DataError, ParamShapeError, ShapeError,
                     TruncatedFileError, VersionError)
from .layers import BNLayer, ConvLayer, ParamStore, count_params, init_weights
from .tensor import Tensor

WEIGHTS_MAGIC = b"MSDF"
WEIGHTS_VERSION = 1
DTYPE_REAL32 = 0
PARAM_TARGET = 490_000
PARAM_RANGE = (465_000, 515_000)


class Stage:
    def __init__(self, store: ParamStore, index: int, channels: int, use_projection: bool):
        cfg = DFBlockConfig(channels, channels)
        self.dfblock = DFBlock(store, f"stage{index}.dfblock", cfg)
        self.proj = Projection(store, f"stage{index}.proj", cfg.out_channels) if use_projection else None
        self.out_channels = cfg.out_channels

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = self.dfblock(x, training)
        if self.proj is not None:
            x = self.proj(x, training)
        return T.avg_pool(x, 2, 2)


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore()
        c0 = config.stem_channels
        self.stem_conv = ConvLayer(self.store, "stem.conv", 3, c0, 3, padding=1, bias=False)
        self.stem_bn = BNLayer(self.store, "stem.bn", c0)
        chans = config.stage_channels()
        self.stages = [Stage(self.store, i, chans[i], config.use_projection)
                       for i in range(config.num_stages)]
        if config.use_dsa:
            self.head = DSAHead(self.store, "head", chans[-1], config.num_classes, config.head_hidden)
        else:
            self.head = PlainHead(self.store, "head", chans[-1], config.num_classes)

    def features(self, batch: Tensor, training: bool) -> Tensor:
        x = T.relu(self.stem_bn(self.stem_conv(batch), training))
        x = T.avg_pool(x, 2, 2)
        for stage in self.stages:
            x = stage(x, training)
        return x

    def forward(self, batch: Tensor, training: bool = False, rng: np.random.Generator | None = None,
                dropout_rate: float | None = None):
        """Return ``(f1, f2, s_agg)``, each of shape (n, num_classes)."""
        h, w = self.config.input_size
        if batch.data.ndim != 4 or batch.shape[1:] != (3, h, w):
            raise ShapeError(f"expected input of shape (n, 3, {h}, {w}), got {batch.shape}")
        rate = self.config.dropout_rate if dropout_rate is None else dropout_rate
        return self.head(self.features(batch, training), training, rate, rng)

    __call__ = forward

    def param_count(self) -> int:
        return count_params(self.store)

    def breakdown(self) -> dict[str, int]:
        """Parameter count per top-level module (stem, stage0, ..., head)."""
        out: dict[str, int] = {}
        for name, t in self.store.named_parameters():
            key = name.split(".", 1)[0]
            out[key] = out.get(key, 0) + t.data.size
        return out


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    model = Model(config)
    init_weights(model.store, seed)
    return model


def forward(model: Model, batch: Tensor, training: bool = False, rng=None):
    return model.forward(batch, training, rng)


def top1(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.atleast_2d(scores), axis=1)


def predict(model: Model, batch: Tensor) -> np.ndarray:
    with T.no_grad():
        _, _, s_agg = model.forward(batch, training=False)
    return top1(s_agg.data)


def predict_scores(model: Model, batch: Tensor) -> np.ndarray:
    with T.no_grad():
        _, _, s_agg = model.forward(batch, training=False)
    return s_agg.data


def calibrate_stem_channels(base: ModelConfig | None = None, candidates=(6, 8, 10, 12),
                            target: int = PARAM_TARGET) -> tuple[int, dict[int, int]]:
    """Pick the stem width whose parameter count lands closest to ``target``.

    Counts are exact: each candidate model is constructed (not initialized).
    """
    base = base or ModelConfig()
    counts = {c: Model(dataclasses.replace(base, stem_channels=c)).param_count() for c in candidates}
    best = min(candidates, key=lambda c: (abs(counts[c] - target), c))
    return best, counts


# ---------------------------------------------------------------- weight file
#
# magic "MSDF" | version u16 | record count u32 | records...
# record: name length u16 | name utf-8 | dtype u8 (0 = real32) | rank u8 | dims u32 x rank | values
# All integers and values little-endian.


def _records(model: Model):
    for name, t in model.store.params.items():
        yield name, t.data
    for name, buf in model.store.buffers.items():
        yield name, buf


def weights_to_bytes(model: Model) -> bytes:
    out = io.BytesIO()
    recs = list(_records(model))
    out.write(WEIGHTS_MAGIC)
    out.write(struct.pack("<HI", WEIGHTS_VERSION, len(recs)))
    for name, arr in recs:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", DTYPE_REAL32, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def save_weights(model: Model, path) -> int:
    """Write the weight file and return its size in bytes."""
    data = weights_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"weight file truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_weights(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    magic = r.take(4)
    if magic != WEIGHTS_MAGIC:
        raise BadMagicError(f"not a weight file: magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    version, count = r.unpack("<HI")
    if version != WEIGHTS_VERSION:
        raise VersionError(f"unsupported weight file version {version} (this build reads {WEIGHTS_VERSION})")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError("weight file has a non-utf-8 record name") from None
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_REAL32:
            raise DataError(f"record {name!r}: unsupported dtype tag {dtype}")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
    if r.pos != len(data):
        raise DataError(f"weight file has {len(data) - r.pos} trailing bytes")
    return out


def load_weights(model: Model, path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read weight file {path}: {e}") from None
    stored = parse_weights(data)
    expected = dict(_records(model))
    for name, arr in expected.items():
        if name not in stored:
            raise ParamShapeError(f"weight file lacks parameter {name!r}")
        if stored[name].shape != arr.shape:
            raise ParamShapeError(f"parameter {name!r}: file has shape {stored[name].shape}, "
                                  f"model expects {arr.shape}")
    extra = sorted(set(stored) - set(expected))
    if extra:
        raise ParamShapeError(f"weight file has parameters unknown to this model, e.g. {extra[0]!r}")
    for name, t in model.store.params.items():
        t.data[...] = stored[name]
        t.grad = None
    for name, buf in model.store.buffers.items():
        buf[...] = stored[name]

