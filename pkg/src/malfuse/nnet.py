"""Minimal dense-tensor neural-network kernel.

Hand-written forward and backward passes for exactly the layer set the
classifier needs: 3x3 same-padded stride-1 convolution, 2x2 stride-2 max
pooling, dense, ReLU, softmax cross-entropy, and the four fusion operators
(add, avg, max, concat). Everything is float64; convolution is
cross-correlation via im2col so the hot loop is one matrix product.

Ops accept either a single sample ([C,H,W] / [D]) or a batch with one extra
leading dimension. Implicit broadcasting is forbidden: mismatched shapes
raise rather than stretch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    ArityMismatch,
    LabelOutOfRange,
    NonFiniteGradient,
    ShapeMismatch,
)

CHECKPOINT_MAGIC = b"MFNET"
CHECKPOINT_VERSION = 1


class Tensor:
    """Float64 value plus an optional gradient accumulator of equal shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeMismatch(f"grad shape {grad.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None


class FuseOp(str, Enum):
    ADD = "add"
    AVG = "avg"
    MAX = "max"
    CONCAT = "concat"


@dataclass(frozen=True)
class FusionSpec:
    """Which operator merges the branch feature vectors, and how many."""

    operator: FuseOp
    input_arity: int

    def __post_init__(self):
        if self.input_arity not in (2, 3):
            raise ArityMismatch(f"fusion arity must be 2 or 3, got {self.input_arity}")


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    """View x with a leading batch axis; report whether one was added."""
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatch(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _im2col3(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N, C*9, H*W] patches of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=np.float64)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols.reshape(n, c * 9, h * w)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero same-padding of width 1."""
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64), 3)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, c, h, wd = xb.shape
    if w.ndim != 4 or w.shape[1:] != (c, 3, 3) or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv weights {w.shape} / bias {b.shape} vs input {xb.shape}")
    f = w.shape[0]
    cols = _im2col3(xb)
    y = (w.reshape(f, c * 9) @ cols).reshape(n, f, h, wd) + b.reshape(1, f, 1, 1)
    return y[0] if squeeze else y


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of a conv2d output gradient dy."""
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64), 3)
    dyb, _ = _batched(np.asarray(dy, dtype=np.float64), 3)
    n, c, h, wd = xb.shape
    f = w.shape[0]
    if dyb.shape != (n, f, h, wd):
        raise ShapeMismatch(f"dy shape {dy.shape} vs output shape {(n, f, h, wd)}")
    if cols is None:
        cols = _im2col3(xb)
    dym = dyb.reshape(n, f, h * wd)
    dw = np.tensordot(dym, cols, axes=([0, 2], [0, 2])).reshape(f, c, 3, 3)
    db = dym.sum(axis=(0, 2))
    dcols = (w.reshape(f, c * 9).T @ dym).reshape(n, c, 9, h, wd)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=np.float64)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + wd] += dcols[:, :, k]
            k += 1
    dx = dxp[:, :, 1 : h + 1, 1 : wd + 1]
    return (dx[0] if squeeze else dx), dw, db


def _pool_quadrants(xp: np.ndarray):
    """The four stride-2 phase views of [N,C,2Ho,2Wo], in row-major window order."""
    return (
        xp[:, :, 0::2, 0::2],
        xp[:, :, 0::2, 1::2],
        xp[:, :, 1::2, 0::2],
        xp[:, :, 1::2, 1::2],
    )


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling, stride 2; odd trailing row/col pool over a singleton.

    Returns (output, argmax) where argmax holds each window's winning
    position 0..3 in row-major order (ties to the first position).
    """
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64), 3)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        xp = np.full((n, c, h + h % 2, w + w % 2), -np.inf, dtype=np.float64)
        xp[:, :, :h, :w] = xb
    else:
        xp = xb
    s00, s01, s10, s11 = _pool_quadrants(xp)
    y = np.maximum(np.maximum(s00, s01), np.maximum(s10, s11))
    idx = np.full(y.shape, 3, dtype=np.int8)
    idx[s10 == y] = 2
    idx[s01 == y] = 1
    idx[s00 == y] = 0
    if squeeze:
        return y[0], idx[0]
    return y, idx


def maxpool2x2_backward(dy: np.ndarray, idx: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    """Route each output gradient to its window's argmax position."""
    squeeze = len(x_shape) == 3
    shape = (1, *x_shape) if squeeze else x_shape
    dyb = dy[None] if squeeze else dy
    idxb = idx[None] if squeeze else idx
    n, c, h, w = shape
    dxp = np.zeros((n, c, h + h % 2, w + w % 2), dtype=np.float64)
    for pos, view in enumerate(_pool_quadrants(dxp)):
        view += dyb * (idxb == pos)
    dx = dxp[:, :, :h, :w]
    return dx[0] if squeeze else dx


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map: y_k = sum_d W[k,d] x[d] + b[k]."""
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64), 1)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or xb.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense weights {w.shape} / bias {b.shape} vs input {xb.shape}")
    y = xb @ w.T + b
    return y[0] if squeeze else y


def dense_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64), 1)
    dyb, _ = _batched(np.asarray(dy, dtype=np.float64), 1)
    if dyb.shape != (xb.shape[0], w.shape[0]):
        raise ShapeMismatch(f"dy shape {dy.shape} vs output dim {w.shape[0]}")
    dx = dyb @ w
    dw = dyb.T @ xb
    db = dyb.sum(axis=0)
    return (dx[0] if squeeze else dx), dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(dy, dtype=np.float64) * (np.asarray(x) > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label) -> tuple[np.ndarray, np.ndarray]:
    """Loss -log softmax(z)[label] and the probabilities.

    Single sample: logits [K], integer label, scalar loss. Batched:
    logits [N,K], labels [N], per-sample loss vector.
    """
    zb, squeeze = _batched(np.asarray(logits, dtype=np.float64), 1)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = zb.shape[1]
    if k < 2:
        raise ShapeMismatch(f"need >= 2 classes, got {k}")
    if labels.shape != (zb.shape[0],):
        raise ShapeMismatch(f"labels shape {labels.shape} vs batch {zb.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelOutOfRange(f"label outside [0, {k})")
    shifted = zb - zb.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    losses = logsumexp - shifted[np.arange(zb.shape[0]), labels]
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    if squeeze:
        return float(losses[0]), probs[0]
    return losses, probs


def softmax_cross_entropy_backward(probs: np.ndarray, label) -> np.ndarray:
    """Gradient of the loss w.r.t. logits: probs - onehot(label)."""
    pb, squeeze = _batched(np.asarray(probs, dtype=np.float64), 1)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    dz = pb.copy()
    dz[np.arange(pb.shape[0]), labels] -= 1.0
    return dz[0] if squeeze else dz


def fuse(inputs, spec: FusionSpec) -> np.ndarray:
    """Merge feature tensors: element-wise add/avg/max or concatenation
    along the feature (last) axis."""
    if len(inputs) != spec.input_arity:
        raise ArityMismatch(f"{len(inputs)} inputs for arity-{spec.input_arity} fusion")
    arrs = [np.asarray(a, dtype=np.float64) for a in inputs]
    first = arrs[0]
    if spec.operator is FuseOp.CONCAT:
        for a in arrs[1:]:
            if a.ndim != first.ndim or a.shape[:-1] != first.shape[:-1]:
                raise ShapeMismatch(f"concat shapes {[a.shape for a in arrs]}")
        return np.concatenate(arrs, axis=-1)
    for a in arrs[1:]:
        if a.shape != first.shape:
            raise ShapeMismatch(f"{spec.operator.value} shapes {[a.shape for a in arrs]}")
    if spec.operator is FuseOp.ADD:
        out = arrs[0].copy()
        for a in arrs[1:]:
            out += a
        return out
    if spec.operator is FuseOp.AVG:
        out = arrs[0].copy()
        for a in arrs[1:]:
            out += a
        return out / len(arrs)
    out = arrs[0].copy()
    for a in arrs[1:]:
        np.maximum(out, a, out=out)
    return out


def fuse_backward(dy: np.ndarray, inputs, spec: FusionSpec) -> list[np.ndarray]:
    """Per-input gradients: add copies, avg copies 1/arity, max routes to
    the first input attaining the maximum, concat slices."""
    if len(inputs) != spec.input_arity:
        raise ArityMismatch(f"{len(inputs)} inputs for arity-{spec.input_arity} fusion")
    arrs = [np.asarray(a, dtype=np.float64) for a in inputs]
    dy = np.asarray(dy, dtype=np.float64)
    if spec.operator is FuseOp.CONCAT:
        sizes = [a.shape[-1] for a in arrs]
        splits = np.cumsum(sizes)[:-1]
        return [g.copy() for g in np.split(dy, splits, axis=-1)]
    if spec.operator is FuseOp.ADD:
        return [dy.copy() for _ in arrs]
    if spec.operator is FuseOp.AVG:
        return [dy / len(arrs) for _ in arrs]
    out = fuse(arrs, spec)
    taken = np.zeros(out.shape, dtype=bool)
    grads = []
    for a in arrs:
        mask = (a == out) & ~taken
        taken |= mask
        grads.append(dy * mask)
    return grads


def grad_check(op, inputs, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    `op(*inputs)` must return (scalar loss, [gradient per input]). Inputs
    are perturbed in place one element at a time, so `op` may close over
    the same arrays.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    loss, grads = op(*inputs)
    if not np.isfinite(loss):
        raise NonFiniteGradient(f"loss {loss} is not finite")
    if len(grads) != len(inputs):
        raise ValueError("op must return one gradient per input")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("analytic gradient contains NaN/Inf")
    max_err = 0.0
    for x, g in zip(inputs, grads):
        if g.shape != x.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} vs input {x.shape}")
        gflat = g.reshape(-1)
        for i in range(x.size):
            orig = x.flat[i]
            x.flat[i] = orig + epsilon
            lp = op(*inputs)[0]
            x.flat[i] = orig - epsilon
            lm = op(*inputs)[0]
            x.flat[i] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            if not np.isfinite(numeric):
                raise NonFiniteGradient(f"numeric gradient {numeric} at element {i}")
            denom = max(1e-8, abs(gflat[i]) + abs(numeric))
            max_err = max(max_err, abs(gflat[i] - numeric) / denom)
    return max_err


# --- layers -----------------------------------------------------------------


class Conv3x3:
    kind = "conv3x3"

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        shape = (out_channels, in_channels, 3, 3)
        if rng is None:
            w = np.zeros(shape)
        else:
            fan_in, fan_out = in_channels * 9, out_channels * 9
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=shape)
        self.weights = Tensor(w)
        self.bias = Tensor(np.zeros(out_channels))
        self._cache = None

    def params(self):
        return [self.weights, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, squeeze = _batched(np.asarray(x, dtype=np.float64), 3)
        cols = _im2col3(xb)
        n, c, h, w = xb.shape
        f = self.out_channels
        y = (self.weights.data.reshape(f, c * 9) @ cols).reshape(n, f, h, w)
        y += self.bias.data.reshape(1, f, 1, 1)
        self._cache = (xb, cols, squeeze)
        return y[0] if squeeze else y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xb, cols, squeeze = self._cache
        dx, dw, db = conv2d_backward(
            dy if not squeeze else dy[None], xb, self.weights.data, cols=cols
        )
        self.weights.accumulate(dw)
        self.bias.accumulate(db)
        dx = np.asarray(dx)
        return dx[0] if squeeze else dx


class MaxPool2x2:
    kind = "maxpool2x2"

    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, idx = maxpool2x2(x)
        self._cache = (idx, np.asarray(x).shape)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        idx, shape = self._cache
        return maxpool2x2_backward(dy, idx, shape)


class ReLU:
    kind = "relu"

    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return relu(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return relu_backward(dy, self._cache)


class Flatten:
    kind = "flatten"

    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._cache = x.shape
        if x.ndim == 3:
            return x.reshape(-1)
        if x.ndim == 4:
            return x.reshape(x.shape[0], -1)
        raise ShapeMismatch(f"flatten expects rank 3 or 4, got {x.shape}")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.asarray(dy, dtype=np.float64).reshape(self._cache)


class Dense:
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            bound = np.sqrt(6.0 / (in_dim + out_dim))
            w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        self.weights = Tensor(w)
        self.bias = Tensor(np.zeros(out_dim))
        self._cache = None

    def params(self):
        return [self.weights, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = np.asarray(x, dtype=np.float64)
        return dense(x, self.weights.data, self.bias.data)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = dense_backward(dy, self._cache, self.weights.data)
        self.weights.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class Sequential:
    """Layer chain that records activations for partial re-entry.

    After forward(), acts[i] is the input of layers[i] (acts[-1] the final
    output); backward_to(i, dy) stops early and returns the gradient with
    respect to acts[i]; forward_from(i, x) re-runs the tail, overwriting the
    tail layers' caches.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        self.acts: list[np.ndarray] | None = None

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        acts = [x]
        for layer in self.layers:
            x = layer.forward(x)
            acts.append(x)
        self.acts = acts
        return x

    def forward_from(self, start: int, x: np.ndarray) -> np.ndarray:
        for layer in self.layers[start:]:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.backward_to(0, dy)

    def backward_to(self, stop: int, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers[stop:]):
            dy = layer.backward(dy)
        return dy

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, layers) -> None:
    """Single binary file: magic, version, layer count, then per layer its
    kind tag and parameter arrays (shape + little-endian float64 data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(layers)))
        for layer in layers:
            tag = layer.kind.encode("ascii")
            fh.write(struct.pack("<B", len(tag)))
            fh.write(tag)
            params = layer.params()
            fh.write(struct.pack("<B", len(params)))
            for p in params:
                fh.write(struct.pack("<B", p.data.ndim))
                fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, layers) -> None:
    """Restore parameters in place; layer kinds and shapes must match."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if count != len(layers):
        raise ValueError(f"{path}: {count} layers in file, {len(layers)} in model")
    for layer in layers:
        (tag_len,) = struct.unpack_from("<B", data, pos)
        pos += 1
        tag = data[pos : pos + tag_len].decode("ascii")
        pos += tag_len
        if tag != layer.kind:
            raise ValueError(f"{path}: layer kind {tag!r} != model layer {layer.kind!r}")
        (n_params,) = struct.unpack_from("<B", data, pos)
        pos += 1
        params = layer.params()
        if n_params != len(params):
            raise ValueError(f"{path}: parameter count mismatch for {tag}")
        for p in params:
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            if shape != p.data.shape:
                raise ValueError(f"{path}: shape {shape} != model shape {p.data.shape}")
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            p.data = np.ascontiguousarray(arr, dtype=np.float64)
