"""Numerical kernels on dense numpy arrays.

Tensors are plain ``numpy.ndarray`` objects, batch-major (``B x C x H x W`` for
images, ``B x D`` for vectors).  Convolutions use the cross-correlation
convention (no kernel flip).  Every kernel here has an adjoint that the
network code uses for exact vector-Jacobian products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError

ACTIVATIONS = ("elu", "tanh", "linear")
POOL_SENTINEL = -1


def _check_dtype(*arrays: np.ndarray) -> None:
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise TypeError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")


@dataclass
class Kernel4D:
    """Convolution filter bank ``C_out x C_in x K_h x K_w`` with stride and padding."""

    weight: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise DimensionError(f"kernel must be 4-D with positive extents, got {self.weight.shape}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weight.shape

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        if hp < kh or wp < kw:
            raise DimensionError(
                f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
        return (hp - kh) // self.stride + 1, (wp - kw) // self.stride + 1


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    _check_dtype(a, b)
    return a @ b


def _windows(x: np.ndarray, k: Kernel4D) -> np.ndarray:
    """Strided view ``B x C x H' x W' x K_h x K_w`` of the padded input."""
    kh, kw = k.weight.shape[2:]
    p = k.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::k.stride, ::k.stride]


def conv2d(x: np.ndarray, k: Kernel4D) -> np.ndarray:
    """Cross-correlate ``x`` (``B x C_in x H x W``) with ``k``."""
    if x.ndim != 4 or x.shape[1] != k.weight.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} incompatible with kernel {k.shape}")
    _check_dtype(x, k.weight)
    k.output_hw(*x.shape[2:])
    win = _windows(x, k)
    out = np.tensordot(win, k.weight, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_transpose(g: np.ndarray, k: Kernel4D, input_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`conv2d` for inputs of shape ``input_shape``.

    ``input_shape`` is needed because several input sizes map to the same
    output size when the stride does not divide evenly.
    """
    if len(input_shape) != 4:
        raise DimensionError(f"input_shape must be 4-D, got {input_shape}")
    b, c, h, w = input_shape
    co, ci, kh, kw = k.weight.shape
    if c != ci:
        raise DimensionError(f"declared input channels {c} != kernel C_in {ci}")
    expected = (b, co, *k.output_hw(h, w))
    if g.shape != expected:
        raise DimensionError(
            f"conv2d_transpose got {g.shape}, but input {tuple(input_shape)} yields {expected}")
    _check_dtype(g, k.weight)
    s, p = k.stride, k.pad
    ho, wo = g.shape[2:]
    cols = np.tensordot(k.weight, g, axes=([0], [1]))  # C_in, K_h, K_w, B, H', W'
    xp = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[:, i, j]
    return np.ascontiguousarray(xp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, k: Kernel4D) -> np.ndarray:
    """Gradient of ``<conv2d(x, k), g>`` with respect to ``k.weight``."""
    expected = (x.shape[0], k.weight.shape[0], *k.output_hw(*x.shape[2:]))
    if g.shape != expected:
        raise DimensionError(f"output gradient {g.shape} does not match {expected}")
    _check_dtype(x, g)
    win = _windows(x, k)
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(dw)


@dataclass(frozen=True)
class ArgIndices:
    """Winner positions of a max-pooling call.

    ``flat`` holds, per output cell, the flat ``h * W + w`` index into the
    input plane of that channel, or ``POOL_SENTINEL`` for all-padding windows.
    """

    flat: np.ndarray
    input_shape: tuple[int, ...]


def maxpool(x: np.ndarray, window: int, stride: int, pad: int = 0) -> tuple[np.ndarray, ArgIndices]:
    if window < 1 or stride < 1 or pad < 0:
        raise ConfigError(f"invalid pooling window={window} stride={stride} pad={pad}")
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    if h + 2 * pad < window or w + 2 * pad < window:
        raise DimensionError(f"pool window {window} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if window == 1 and stride == 1 and pad == 0:
        flat = np.broadcast_to(np.arange(h * w).reshape(h, w), x.shape)
        return x.copy(), ArgIndices(flat, x.shape)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    win = win.reshape(b, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)  # first maximum == lowest flat input index
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // window - pad
    cols = np.arange(wo)[None, :] * stride + arg % window - pad
    flat = rows * w + cols
    empty = np.isneginf(out)
    if empty.any():
        out = np.where(empty, 0, out).astype(x.dtype)
        flat = np.where(empty, POOL_SENTINEL, flat)
    return np.ascontiguousarray(out), ArgIndices(flat, x.shape)


def maxpool_vjp(g: np.ndarray, idx: ArgIndices, input_shape: tuple[int, ...]) -> np.ndarray:
    """Scatter-add ``g`` onto the winning input positions."""
    if tuple(input_shape) != tuple(idx.input_shape) or g.shape != idx.flat.shape:
        raise DimensionError(
            f"stale pool indices: g {g.shape} / idx {idx.flat.shape}, "
            f"input {tuple(input_shape)} / recorded {idx.input_shape}")
    b, c, h, w = input_shape
    plane = np.arange(b * c).reshape(b, c, 1, 1) * (h * w)
    valid = idx.flat != POOL_SENTINEL
    target = (idx.flat + plane)[valid]
    out = np.bincount(target, weights=g[valid], minlength=b * c * h * w)
    return out.reshape(input_shape).astype(g.dtype, copy=False)


def maxpool_jvp(u: np.ndarray, idx: ArgIndices) -> np.ndarray:
    """Directional derivative of max-pooling: gather ``u`` at the winners."""
    if u.shape != tuple(idx.input_shape):
        raise DimensionError(f"direction {u.shape} does not match pooled input {idx.input_shape}")
    b, c, h, w = u.shape
    flat = u.reshape(b, c, h * w)
    safe = np.where(idx.flat == POOL_SENTINEL, 0, idx.flat).reshape(b, c, -1)
    out = np.take_along_axis(flat, safe, axis=-1).reshape(idx.flat.shape)
    return np.where(idx.flat == POOL_SENTINEL, 0, out).astype(u.dtype, copy=False)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "elu":
        return np.where(x >= 0, x, np.expm1(np.minimum(x, 0)))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_deriv(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise derivative; ELU uses the right limit (1) at zero."""
    if kind == "elu":
        return np.where(x >= 0, 1, np.exp(np.minimum(x, 0))).astype(x.dtype, copy=False)
    if kind == "tanh":
        return 1 - np.tanh(x) ** 2
    if kind == "linear":
        return np.ones_like(x)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be a 1-D integer array, got {labels.dtype} {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"label out of range [0, {classes}): min {labels.min()}, max {labels.max()}")
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(logits)`` and its gradient ``(p - y) / B``.

    ``labels`` is either a one-hot matrix or a vector of class indices.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    bsz, classes = logits.shape
    labels = np.asarray(labels)
    if labels.ndim == 1:
        y = one_hot(labels, classes, logits.dtype)
    else:
        if labels.shape != logits.shape:
            raise DataError(f"one-hot labels {labels.shape} do not match logits {logits.shape}")
        if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
            raise DataError("label rows are not one-hot")
        y = labels.astype(logits.dtype, copy=False)
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(y * log_p).sum() / bsz)
    grad = (np.exp(log_p) - y) / bsz
    return loss, grad


def squared_error_grad(out: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``0.5 * ||out - target||^2`` and its gradient."""
    if out.shape != target.shape:
        raise DimensionError(f"prediction {out.shape} and target {target.shape} differ")
    diff = out - target
    bsz = out.shape[0]
    return float(0.5 * np.sum(diff * diff) / bsz), diff / bsz
