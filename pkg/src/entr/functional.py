"""Differentiable layer primitives used by the residual networks.

Every function takes and returns :class:`~entr.tensor.Tensor` objects and
records a backward closure when any input requires gradients. Convolution
runs as im2col + matrix multiply; :func:`conv2d_direct` is the plain loop
version kept as a reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError, StateError
from .tensor import Tensor, _as_tensor


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def _mode(mode) -> Mode:
    return mode if isinstance(mode, Mode) else Mode(mode)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding):
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be non-negative, got {padding}")
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x_shape} and {w_shape}")
    n, c, h, w = x_shape
    f, wc, kh, kw = w_shape
    if wc != c:
        raise DimensionError(f"weight has {wc} input channels, input has {c}")
    if kh != kw:
        raise DimensionError(f"square kernels only, got {kh}x{kw}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh} larger than padded input {h + 2 * padding}x{w + 2 * padding}")


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv(x.shape, weight.shape, stride, padding)
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct nested-loop convolution on raw arrays, one window at a time."""
    _check_conv(x.shape, weight.shape, stride, padding)
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * weight[o, ch, u, v]
                    if bias is not None:
                        acc += bias[o]
                    out[b, o, i, j] = acc
    return out


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None,
                mode=Mode.TRAIN, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    mode = _mode(mode)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ParameterError("epsilon must be positive")
    m = n * h * w
    if m < 1:
        raise DimensionError("batchnorm2d needs at least one value per channel")
    shape = (1, c, 1, 1)
    if mode is Mode.EVAL:
        if running is None or running.mean is None or running.var is None:
            raise StateError("eval-mode batchnorm needs initialized running statistics")
        mean = running.mean.astype(x.dtype, copy=False)
        var = running.var.astype(x.dtype, copy=False)
    else:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            if running.mean is None:
                running.mean = np.zeros(c, dtype=x.dtype)
                running.var = np.ones(c, dtype=x.dtype)
            running.mean = ((1 - momentum) * running.mean + momentum * mean).astype(running.mean.dtype)
            running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(running.var.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    gdata = gamma.data

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = (gdata * invstd).reshape(shape)
            if mode is Mode.EVAL:
                gx = g * scale
            else:
                gsum = g.sum(axis=(0, 2, 3)).reshape(shape)
                gxhat = (g * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = scale / m * (m * g - gsum - xhat * gxhat)
        return gx, gg, gbeta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(g.dtype, copy=True),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise DimensionError("cannot flatten a 0-d tensor")
    return x.reshape((x.shape[0], -1))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out.astype(x.dtype, copy=False), parents, backward)


def dropout(x: Tensor, p: float, mode=Mode.TRAIN, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval is the identity."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if _mode(mode) is Mode.EVAL or p == 0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = _as_tensor(logits, np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not conform")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1
        return (probs * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
