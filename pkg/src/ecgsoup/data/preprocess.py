"""Bring raw recordings onto the common 100 Hz, 10 s, z-normalised grid."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import InputError

log = logging.getLogger(__name__)

TARGET_RATE = 100
TARGET_LENGTH = 1000
_NORMALISED_TOL = 1e-9


def resample_linear(signal, src_rate: float, dst_rate: float = TARGET_RATE) -> np.ndarray:
    """Linear-interpolation resampling of ``(C, n)`` samples, no anti-alias filter."""
    signal = np.asarray(signal, dtype=np.float64)
    if src_rate <= 0 or dst_rate <= 0:
        raise InputError(f"sampling rates must be positive, got {src_rate} -> {dst_rate}")
    if src_rate == dst_rate:
        return signal.copy()
    n = signal.shape[-1]
    count = int(round(n * dst_rate / src_rate))
    src_t = np.arange(n) / src_rate
    dst_t = np.arange(count) / dst_rate
    dst_t = dst_t[dst_t <= src_t[-1]] if n else dst_t[:0]
    return np.stack([np.interp(dst_t, src_t, lead) for lead in signal.reshape(-1, n)]).reshape(
        *signal.shape[:-1], len(dst_t)
    )


def fix_length(signal, length: int = TARGET_LENGTH) -> np.ndarray:
    """Truncate to the first ``length`` samples or zero-pad at the end."""
    signal = np.asarray(signal)
    n = signal.shape[-1]
    if n >= length:
        return signal[..., :length].copy()
    pad = [(0, 0)] * (signal.ndim - 1) + [(0, length - n)]
    return np.pad(signal, pad)


def znormalize(signal) -> np.ndarray:
    """Per-lead zero mean, unit variance.

    Constant leads become all zeros (with a warning). Leads already within
    1e-9 of zero mean and unit standard deviation are returned unchanged so
    that normalising twice is bitwise idempotent.
    """
    signal = np.asarray(signal, dtype=np.float64)
    out = np.empty_like(signal)
    for i, lead in enumerate(signal):
        mu = lead.mean()
        sd = lead.std()
        if sd == 0 or not np.isfinite(sd):
            log.warning("lead %d is constant; normalised to zeros", i)
            out[i] = 0.0
        elif abs(mu) < _NORMALISED_TOL and abs(sd - 1.0) < _NORMALISED_TOL:
            out[i] = lead
        else:
            out[i] = (lead - mu) / sd
    return out


def preprocess(raw, src_rate: float, length: int = TARGET_LENGTH, rate: float = TARGET_RATE) -> np.ndarray:
    """Resample to ``rate``, truncate or zero-pad to ``length``, then z-normalise each lead.

    Parameters
    ----------
    raw : array, shape (C, n)
    src_rate : float
        Sampling rate of ``raw`` in Hz.

    Returns
    -------
    ndarray, shape (C, length), float64
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise InputError(f"expected a (leads, samples) array, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise InputError("raw signal contains non-finite samples")
    return znormalize(fix_length(resample_linear(raw, src_rate, rate), length))
