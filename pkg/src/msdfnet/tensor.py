"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects.  When any input requires a
gradient, the op records its parents and a backward rule on the output; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``grad`` on every reachable tensor.

Kernels are plain numpy.  Training runs in float32; :func:`precision` switches
to float64 for finite-difference gradient checking.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, LabelError, ShapeError, UsageError

PRECISIONS = {"standard32": np.float32, "verify64": np.float64}
PROB_FLOOR = 1e-12

_state = {"dtype": np.float32, "grad_enabled": True}


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    """Run the enclosed block with every new tensor in the given precision."""
    if mode not in PRECISIONS:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(PRECISIONS)}")
    prev = _state["dtype"]
    _state["dtype"] = PRECISIONS[mode]
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self):
        """Populate ``grad`` for every tensor reachable from this scalar."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")
    out = Tensor(data)
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window_slices(k: int, stride: int, dilation: int, out: int):
    for i in range(k):
        start = i * dilation
        yield i, slice(start, start + stride * (out - 1) + 1, stride)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation over an NCHW batch."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride={stride}, padding={padding}, dilation={dilation}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ConfigError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} does not match weight {weight.shape}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}, weight {weight.shape}")

    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols6 = np.empty((n, c, kh, kw, ho, wo), dtype=x.data.dtype)
        for i, si in _window_slices(kh, stride, dilation, ho):
            for j, sj in _window_slices(kw, stride, dilation, wo):
                cols6[:, :, i, j] = xp[:, :, si, sj]
        cols = cols6.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(oc, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, oc, ho, wo)

    def backward(g):
        g2 = g.reshape(n, oc, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i, si in _window_slices(kh, stride, dilation, ho):
                    for j, sj in _window_slices(kw, stride, dilation, wo):
                        gxp[:, :, si, sj] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float = 0.1, epsilon: float = 1e-5,
               training: bool = True) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics over (n, h, w) normalize the input and
    the running estimates are updated in place with an exponential moving
    average (unbiased variance).  In inference mode the running estimates are
    used instead.
    """
    if epsilon <= 0:
        raise ConfigError("batch_norm: epsilon must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm: input has {c} channels, gamma/beta have {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        m = x.data.size // c
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
        centered = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.data.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.data.size // c
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """|a - b| elementwise; subgradient 0 where a == b."""
    _check_same_shape(a, b, "abs_diff")
    d = a.data - b.data
    sign = np.sign(d)

    def backward(g):
        ga = g * sign
        return ga, -ga

    return _result(np.abs(d), (a, b), backward, "abs_diff")


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise product with a same-shaped tensor or a python scalar."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    s = float(b)
    return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "mul")


def tensor_sum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def flatten(x: Tensor) -> Tensor:
    """Reshape (n, ...) to (n, prod(...))."""
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


# ---------------------------------------------------------------- channel plumbing


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: no inputs")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: cannot join {ref} with {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(out, tuple(parts), backward, "concat_channels")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not partition {x.shape[1]} channels")
    if len(sizes) == 1:
        return [x]
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_result(x.data[:, lo:hi].copy(), (x,), backward, "split_channels"))
        start = hi
    return outs


# ---------------------------------------------------------------- pooling


def avg_pool(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ConfigError(f"avg_pool: window and stride must be positive, got {window}, {stride}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"avg_pool: window {window} larger than spatial size {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    scale = x.data.dtype.type(1.0 / (window * window))
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for _, si in _window_slices(window, stride, 1, ho):
        for _, sj in _window_slices(window, stride, 1, wo):
            out += x.data[:, :, si, sj]
    out *= scale

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gs = g * scale
        for _, si in _window_slices(window, stride, 1, ho):
            for _, sj in _window_slices(window, stride, 1, wo):
                gx[:, :, si, sj] += gs
        return (gx,)

    return _result(out, (x,), backward, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = x.data.dtype.type(1.0 / (h * w))
    return _result(out, (x,), lambda g: (np.broadcast_to(g * scale, x.shape).copy(),), "global_avg_pool")


# ---------------------------------------------------------------- regularization


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or outside training."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - rate))
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- classification


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _labels_for(p: np.ndarray, labels) -> np.ndarray:
    k = p.shape[-1]
    lab = np.atleast_1d(np.asarray(labels))
    if lab.dtype.kind not in "iu":
        raise LabelError(f"labels must be integers, got dtype {lab.dtype}")
    n = 1 if p.ndim == 1 else p.shape[0]
    if lab.shape != (n,):
        raise LabelError(f"expected {n} labels, got {lab.shape}")
    bad = (lab < 0) | (lab >= k)
    if bad.any():
        raise LabelError(f"label {int(lab[bad][0])} out of range for {k} classes")
    return lab


def softmax(logits: Tensor) -> Tensor:
    """Max-subtracted softmax along the last axis."""
    if logits.shape[-1] < 1:
        raise ShapeError("softmax needs at least one class")
    y = _softmax_np(logits.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (logits,), backward, "softmax")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log(p[label]) with probabilities clamped below at 1e-12.

    Accepts a single distribution of shape (K,) with an integer label, or a
    batch of shape (n, K) with n labels.
    """
    lab = _labels_for(probs.data, labels)
    p2 = probs.data.reshape(len(lab), -1)
    rows = np.arange(len(lab))
    picked = p2[rows, lab]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype)

    def backward(g):
        gp = np.zeros_like(p2, dtype=g.dtype)
        gp[rows, lab] = np.where(picked >= PROB_FLOOR, -1.0 / (len(lab) * clamped), 0.0)
        return ((gp * g).reshape(probs.shape),)

    return _result(loss, (probs,), backward, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """cross_entropy(softmax(logits)) with the fused gradient (p - onehot) / n."""
    lab = _labels_for(logits.data, labels)
    z = logits.data.reshape(len(lab), -1)
    rows = np.arange(len(lab))
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.maximum(logp[rows, lab], math.log(PROB_FLOOR))
    loss = np.asarray(-picked.mean(), dtype=logits.data.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, lab] -= 1
        d *= g / len(lab)
        return (d.reshape(logits.shape),)

    return _result(loss, (logits,), backward, "softmax_cross_entropy")
