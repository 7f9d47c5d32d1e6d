"""Fused neural-network operations with hand-written backward rules."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, InputError, ShapeError
from .tensor import Tensor, _result, _stable_sigmoid, as_tensor, check_finite

LAYER_NORM_EPS = 1e-5


def softmax(x, axis=-1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the running max.

    Raises NumericError on non-finite input.
    """
    x = as_tensor(x)
    check_finite(x, "softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis. Zero-variance rows map to ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    if eps == 0:
        denom = np.where(denom == 0, 1.0, denom)
    inv = 1.0 / denom
    xhat = centered * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv / n * (
            n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), bw)


def batch_norm_train(x, gamma, beta, eps):
    """Batch normalisation over axis 0 using batch statistics.

    Returns the output tensor and the (biased) batch mean and variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm_1d expects (batch, features), got {x.shape}")
    xd = x.data
    n = xd.shape[0]
    mu = xd.mean(axis=0)
    centered = xd - mu
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw), mu, var


def dropout(x, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over every (sample, label) entry, in log space."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise InputError("multi-label targets must be 0 or 1")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    count = z.size

    def bw(g):
        return (g * (_stable_sigmoid(z) - t) / count,)

    return _result(np.asarray(per.mean(), dtype=logits.dtype), (logits,), bw)
