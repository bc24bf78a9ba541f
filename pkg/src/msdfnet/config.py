"""Model and training configuration plus the plain-text ``key=value`` format.

A config file holds keys from both :class:`ModelConfig` and
:class:`TrainConfig`; ``dropout_rate`` feeds both.  Blank lines and ``#``
comments are ignored.  Example::

    input_size=64,64
    stem_channels=6
    num_stages=3
    num_classes=30
    alpha=0.0005
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    stem_channels: int = 6
    num_stages: int = 3
    num_classes: int = 30
    # DSA hidden width = stage output channels // head_reduction
    head_reduction: int = 8
    use_projection: bool = True
    use_dsa: bool = True
    dropout_rate: float = 0.2

    def __post_init__(self):
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        if self.stem_channels < 1 or self.num_stages < 0 or self.num_classes < 1 or self.head_reduction < 1:
            raise ConfigError(f"invalid model config {self}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        # stem pool + one pool per stage
        need = 2 ** (self.num_stages + 1)
        if h < need or w < need:
            raise ConfigError(f"input {h}x{w} pools below 1x1 after {self.num_stages} stages "
                              f"(needs at least {need}x{need})")

    def stage_channels(self) -> list[int]:
        """Input channels of each stage followed by the final feature width."""
        chans = [self.stem_channels]
        for _ in range(self.num_stages):
            chans.append(4 * chans[-1])
        return chans

    def final_spatial(self) -> tuple[int, int]:
        h, w = self.input_size
        for _ in range(self.num_stages + 1):
            h, w = h // 2, w // 2
        return h, w

    @property
    def head_hidden(self) -> int:
        return max(1, self.stage_channels()[-1] // self.head_reduction)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5e-4
    base_lr: float = 1e-3
    decay_period: int = 30
    total_epochs: int = 120
    dropout_rate: float = 0.2
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.total_epochs < 1 or self.batch_size < 1 or self.decay_period < 1:
            raise ConfigError(f"invalid training config {self}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        if "tuple" in str(typ):
            parts = raw.replace("x", ",").split(",")
            if len(parts) != 2:
                raise ValueError(raw)
            return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    mfields = {f.name: f.type for f in fields(ModelConfig)}
    tfields = {f.name: f.type for f in fields(TrainConfig)}
    mvals, tvals = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in mfields and key not in tfields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in mfields:
            mvals[key] = _parse_value(key, raw, mfields[key])
        if key in tfields:
            tvals[key] = _parse_value(key, raw, tfields[key])
    return RunConfig(dataclasses.replace(base.model, **mvals), dataclasses.replace(base.train, **tvals))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    lines = ["# model"]
    lines += [f"{f.name}={_format_value(getattr(cfg.model, f.name))}" for f in fields(ModelConfig)]
    lines.append("# training")
    lines += [f"{f.name}={_format_value(getattr(cfg.train, f.name))}"
              for f in fields(TrainConfig) if f.name != "dropout_rate"]
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path):
    Path(path).write_text(format_config(cfg))
