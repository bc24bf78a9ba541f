"""Dual-loss training, Adam, the step-decay schedule, augmentation and the
repeated-split evaluation protocol."""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import Dataset, stratified_split
from .errors import ConfigError, DataError, ShapeError
from .model import Model, build_model
from .tensor import Tensor


# ---------------------------------------------------------------- losses


def dual_loss(f1: Tensor, f2: Tensor, s_agg: Tensor, labels, alpha: float):
    """Return ``(l_dual, l_n, l_r)`` as scalar tensors (batch means).

    ``l_n`` scores the aggregated logits, ``l_r`` scores the absolute branch
    difference ``|f1 - f2|`` against the same labels, and
    ``l_dual = l_n + alpha * l_r``.
    """
    if not (f1.shape == f2.shape == s_agg.shape):
        raise ShapeError(f"dual_loss: branch shapes differ {f1.shape}, {f2.shape}, {s_agg.shape}")
    l_n = T.softmax_cross_entropy(s_agg, labels)
    l_r = T.softmax_cross_entropy(T.abs_diff(f1, f2), labels)
    return T.add(l_n, T.mul(l_r, alpha)), l_n, l_r


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place.  Gradients are left as they are."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient of {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.base_lr * 0.5 ** (epoch // config.decay_period)


# ---------------------------------------------------------------- augmentation


def apply_augmentation(image: np.ndarray, quarter_turns: int, flip: bool, scale: float) -> np.ndarray:
    out = np.rot90(image, quarter_turns, axes=(1, 2)) if quarter_turns % 4 else image
    if flip:
        out = out[:, :, ::-1]
    if scale != 1.0:
        out = np.clip(out * np.float32(scale), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random quarter-turn rotation, horizontal flip (p=0.5), brightness in [0.8, 1.2]."""
    _, h, w = image.shape
    k = int(rng.integers(4))
    if h != w:
        k = 2 * (k % 2)
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.8, 1.2))
    return apply_augmentation(image, k, flip, scale)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_n: float
    l_r: float
    l_dual: float
    train_acc: float


HISTORY_COLUMNS = ("epoch", "lr", "l_n", "l_r", "l_dual", "train_acc")


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.l_n), repr(r.l_r), repr(r.l_dual), repr(r.train_acc)])
        return buf.getvalue()


def _check_compatible(model: Model, ds: Dataset):
    if len(ds) == 0:
        raise DataError("dataset is empty")
    if ds.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, model expects {model.config.num_classes}")
    if ds.image_size != tuple(model.config.input_size):
        raise ConfigError(f"dataset images are {ds.image_size}, model expects {model.config.input_size}")


def train(model: Model, train_set: Dataset, config: TrainConfig, log=None) -> TrainHistory:
    """Train with the dual loss; deterministic for a given ``config.seed``."""
    _check_compatible(model, train_set)
    rng = np.random.default_rng(config.seed)
    params = dict(model.store.named_parameters())
    state = AdamState()
    history = TrainHistory()
    n = len(train_set)
    for epoch in range(config.total_epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(n)
        sums = [0.0, 0.0, 0.0]
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            imgs = train_set.images[idx]
            if config.augment:
                imgs = np.stack([augment(im, rng) for im in imgs])
            labels = train_set.labels[idx]
            f1, f2, s_agg = model.forward(Tensor(imgs), training=True, rng=rng,
                                          dropout_rate=config.dropout_rate)
            l_dual, l_n, l_r = dual_loss(f1, f2, s_agg, labels, config.alpha)
            model.store.zero_grad()
            l_dual.backward()
            adam_step(params, state, lr, config.beta1, config.beta2, config.adam_eps)
            b = len(idx)
            sums[0] += b * float(l_n.data)
            sums[1] += b * float(l_r.data)
            sums[2] += b * float(l_dual.data)
            correct += int((np.argmax(s_agg.data, axis=1) == labels).sum())
        rec = EpochRecord(epoch, lr, sums[0] / n, sums[1] / n, sums[2] / n, correct / n)
        history.records.append(rec)
        if log is not None:
            log(rec)
    model.store.zero_grad()
    return history


# ---------------------------------------------------------------- evaluation


def confusion_matrix(model: Model, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    k = model.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            sl = slice(start, start + batch_size)
            _, _, s_agg = model.forward(Tensor(ds.images[sl]), training=False)
            np.add.at(cm, (ds.labels[sl], np.argmax(s_agg.data, axis=1)), 1)
    return cm


def evaluate(model: Model, test_set: Dataset) -> float:
    _check_compatible(model, test_set)
    cm = confusion_matrix(model, test_set)
    return int(np.trace(cm)) / int(cm.sum())


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    std: float
    confusion: np.ndarray
    train_ratio: float
    train_accuracies: list[float] = field(default_factory=list)

    @property
    def single_run(self) -> bool:
        return len(self.accuracies) == 1

    def summary(self) -> str:
        line = (f"accuracy: {self.mean:.4f} ± {self.std:.4f} "
                f"({len(self.accuracies)} runs, ratio {self.train_ratio:g})")
        if self.single_run:
            line += " [single run: std undefined, reported as 0]"
        return line

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("run", "accuracy"))
        for i, a in enumerate(self.accuracies):
            w.writerow([i, repr(a)])
        return buf.getvalue()


def aggregate(accuracies, confusion=None, train_ratio: float = float("nan"), train_accuracies=()) -> EvalReport:
    accs = [float(a) for a in accuracies]
    if not accs:
        raise ValueError("no runs to aggregate")
    mean = statistics.fmean(accs)
    std = statistics.stdev(accs) if len(accs) > 1 else 0.0
    return EvalReport(accs, mean, std, confusion, train_ratio, list(train_accuracies))


def run_protocol(ds: Dataset, train_ratio: float, runs: int, config: TrainConfig,
                 model_config: ModelConfig, log=None) -> EvalReport:
    """Fresh stratified split, fresh model and full training per run.

    Run ``i`` uses seed ``config.seed + i`` for the split, the initial weights
    and the training stream.
    """
    if runs < 1:
        raise ConfigError("runs must be at least 1")
    if not 0 < train_ratio < 1:
        raise ConfigError(f"train ratio must lie in (0, 1), got {train_ratio}")
    accs, train_accs, cm = [], [], None
    for run in range(runs):
        seed = config.seed + run
        plan = stratified_split(ds, train_ratio, seed)
        model = build_model(model_config, seed)
        run_cfg = dataclasses.replace(config, seed=seed)
        train(model, ds.subset(plan.train), run_cfg)
        train_accs.append(evaluate(model, ds.subset(plan.train)))
        test = ds.subset(plan.test)
        cm = confusion_matrix(model, test)
        accs.append(int(np.trace(cm)) / int(cm.sum()))
        if log is not None:
            log(run, accs[-1], train_accs[-1])
    return aggregate(accs, cm, train_ratio, train_accs)
