"""Central finite-difference verification of every differentiable op.

All cases run under ``precision("verify64")``.  Each op is reduced to a scalar
through a fixed random weighting so that no gradient is trivially uniform.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import DFBlock, DFBlockConfig, DSAHead, Projection
from .config import ModelConfig
from .layers import ParamStore, init_weights
from .tensor import Tensor

STEP = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3
DENOM_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], inputs: list[Tensor], step: float = STEP) -> float:
    """Worst elementwise relative error between backward() and central differences."""
    for t in inputs:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        worst = max(worst, relative_error(a, numeric))
    for t in inputs:
        t.grad = None
    return worst


def _weighted(out, rng):
    """Reduce an op output (tensor or list of tensors) to a scalar via fixed random weights."""
    outs = out if isinstance(out, (list, tuple)) else [out]
    total = None
    for o in outs:
        w = Tensor(rng.uniform(0.5, 1.5, size=o.shape) * rng.choice([-1.0, 1.0], size=o.shape))
        term = T.tensor_sum(T.mul(o, w))
        total = term if total is None else T.add(total, term)
    return total


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _leaf(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _op_case(fn, inputs, seed):
    """Check ``fn(*inputs)`` with weights that stay fixed across the FD evaluations."""
    def loss():
        return _weighted(fn(*inputs), np.random.default_rng(seed))
    return check_gradients(loss, list(inputs))


def _cases(rng) -> list[tuple[str, float, Callable[[], float]]]:
    def conv_cases():
        worst = 0.0
        for k, stride, pad, dil, bias in [(1, 1, 0, 1, True), (3, 1, 1, 1, True), (3, 2, 1, 1, False),
                                          (3, 1, 2, 2, True), (3, 2, 2, 2, True)]:
            x = _leaf(rng.normal(size=(2, 3, 4, 4)))
            w = _leaf(rng.normal(size=(4, 3, k, k)))
            ins = [x, w] + ([_leaf(rng.normal(size=4))] if bias else [])
            worst = max(worst, _op_case(
                lambda x, w, *b: T.conv2d(x, w, b[0] if b else None, stride, pad, dil), ins, 1))
        return worst

    def bn_cases():
        worst = 0.0
        for training in (True, False):
            c = 3
            x = _leaf(rng.normal(size=(3, c, 2, 2)))
            g = _leaf(rng.uniform(0.5, 1.5, size=c))
            b = _leaf(rng.normal(size=c))
            rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
            worst = max(worst, _op_case(
                lambda x, g, b: T.batch_norm(x, g, b, rm.copy(), rv.copy(), 0.1, 1e-5, training),
                [x, g, b], 2))
        return worst

    def binary(fn):
        return lambda: _op_case(fn, [_leaf(rng.normal(size=(2, 3, 2, 2))),
                                     _leaf(rng.normal(size=(2, 3, 2, 2)))], 3)

    def unary(fn, shape=(2, 3, 4, 4), away=False):
        return lambda: _op_case(fn, [_leaf(_away_from_zero(rng, shape) if away else rng.normal(size=shape))], 4)

    def ce():
        logits = rng.normal(size=(4, 5))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        labels = np.array([0, 3, 4, 1])
        p = _leaf(probs)
        return check_gradients(lambda: T.cross_entropy(p, labels), [p])

    def sce():
        x = _leaf(rng.normal(size=(4, 5)))
        labels = np.array([2, 0, 4, 4])
        return check_gradients(lambda: T.softmax_cross_entropy(x, labels), [x])

    def dual():
        from .train import dual_loss
        f1, f2, s = (_leaf(rng.normal(size=(4, 5))) for _ in range(3))
        labels = np.array([1, 0, 3, 2])
        return check_gradients(lambda: dual_loss(f1, f2, s, labels, 0.3)[0], [f1, f2, s])

    def dropout_case():
        def fn(x):
            return T.dropout(x, 0.2, True, np.random.default_rng(11))
        return unary(fn)()

    def df_block():
        store = ParamStore()
        blk = DFBlock(store, "blk", DFBlockConfig(3, 2))
        init_weights(store, 5)
        x = _leaf(rng.normal(size=(3, 3, 3, 3)))
        return check_gradients(lambda: _weighted(blk(x, True), np.random.default_rng(6)),
                               [x] + list(store.params.values()))

    def projection():
        store = ParamStore()
        proj = Projection(store, "proj", 4)
        init_weights(store, 7)
        x = _leaf(rng.normal(size=(3, 4, 2, 2)))
        return check_gradients(lambda: _weighted(proj(x, True), np.random.default_rng(8)),
                               [x] + list(store.params.values()))

    def dsa():
        store = ParamStore()
        head = DSAHead(store, "head", 6, 3, 2)
        init_weights(store, 9)
        x = _leaf(rng.normal(size=(3, 6, 3, 3)))
        return check_gradients(
            lambda: _weighted(head(x, True, 0.2, np.random.default_rng(10)), np.random.default_rng(12)),
            [x] + list(store.params.values()))

    return [
        ("conv2d", OP_TOL, conv_cases),
        ("batch_norm", OP_TOL, bn_cases),
        ("relu", OP_TOL, unary(T.relu, away=True)),
        ("add", OP_TOL, binary(T.add)),
        ("abs_diff", OP_TOL, binary(T.abs_diff)),
        ("mul", OP_TOL, binary(T.mul)),
        ("sum", OP_TOL, unary(T.tensor_sum)),
        ("flatten", OP_TOL, unary(T.flatten)),
        ("concat_channels", OP_TOL, binary(lambda a, b: T.concat_channels([a, b]))),
        ("split_channels", OP_TOL, unary(lambda x: T.split_channels(x, [1, 2]))),
        ("avg_pool", OP_TOL, unary(lambda x: T.avg_pool(x, 2, 2))),
        ("global_avg_pool", OP_TOL, unary(T.global_avg_pool)),
        ("dropout", OP_TOL, dropout_case),
        ("softmax", OP_TOL, unary(T.softmax, shape=(3, 5))),
        ("cross_entropy", OP_TOL, ce),
        ("softmax_cross_entropy", OP_TOL, sce),
        ("dual_loss", OP_TOL, dual),
        ("df_block", OP_TOL, df_block),
        ("projection", OP_TOL, projection),
        ("dsa_head", OP_TOL, dsa),
        ("model", MODEL_TOL, end_to_end),
    ]


def end_to_end(seed: int = 0) -> float:
    """Dual-loss gradient of a tiny full model (S=1, C0=4, 4x4 input) w.r.t. every parameter."""
    from .model import build_model
    from .train import dual_loss

    cfg = ModelConfig(input_size=(4, 4), stem_channels=4, num_stages=1, num_classes=3, dropout_rate=0.2)
    rng = np.random.default_rng(seed)
    with T.precision("verify64"):
        model = build_model(cfg, seed)
        x = Tensor(rng.uniform(0, 1, size=(4, 3, 4, 4)), requires_grad=True)
        labels = np.array([0, 1, 2, 1])

        def loss():
            f1, f2, s = model.forward(x, training=True, rng=np.random.default_rng(seed + 1))
            return dual_loss(f1, f2, s, labels, 5e-4)[0]

        return check_gradients(loss, [x] + list(model.store.params.values()))


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with T.precision("verify64"):
        for name, tol, case in _cases(rng):
            results.append(CheckResult(name, case(), tol))
    return results
