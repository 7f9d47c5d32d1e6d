"""Multi-label evaluation: AUC, accuracy and F1, macro- and sample-averaged."""

from __future__ import annotations

import logging
import math
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from ..errors import InputError

log = logging.getLogger(__name__)

METRIC_NAMES = ("macro_auc", "sample_auc", "instance_acc", "sample_acc", "macro_f1", "sample_f1")


def _auc_fraction(scores, targets):
    """Exact tie-aware pair-ordering fraction, or None when a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    n_pos = int(targets.sum())
    n_neg = targets.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # average ranks are half-integers, so twice their sum is an exact integer
    twice = int(round(2 * rankdata(scores)[targets].sum())) - n_pos * (n_pos + 1)
    return Fraction(twice, 2 * n_pos * n_neg)


def binary_auc(scores, targets) -> float:
    """ROC-AUC as the tie-aware fraction of correctly ordered (positive, negative) pairs.

    Computed from average ranks; equals explicit pair counting exactly.
    Returns NaN when either class is absent.
    """
    frac = _auc_fraction(scores, targets)
    return math.nan if frac is None else float(frac)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    # nothing predicted and nothing present counts as a perfect score
    return Fraction(1) if denom == 0 else Fraction(2 * tp, denom)


def _mean(fracs):
    """Correctly rounded mean of exact fractions; NaN for an empty list."""
    fracs = [f for f in fracs if f is not None]
    return float(sum(fracs, Fraction(0)) / len(fracs)) if fracs else math.nan


def _validate(scores, targets):
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.ndim == 1:
        scores = scores[:, None]
    if targets.ndim == 1:
        targets = targets[:, None]
    if scores.shape != targets.shape:
        raise InputError(f"scores {scores.shape} and targets {targets.shape} differ in shape")
    if not np.all(np.isfinite(scores)) or scores.min(initial=0) < 0 or scores.max(initial=0) > 1:
        raise InputError("scores must be finite probabilities in [0, 1]")
    if not np.isin(targets, (0, 1)).all():
        raise InputError("targets must be multi-hot 0/1")
    return scores, targets.astype(np.int64)


def evaluate(scores, targets, threshold: float = 0.5) -> dict:
    """All six metrics for ``(n_samples, n_labels)`` probabilities.

    Labels (or samples) with a single target class are skipped for AUC with a
    warning; the averages are taken over the scored ones only. Hard decisions
    are ``score >= threshold``.
    """
    scores, targets = _validate(scores, targets)
    n, c = scores.shape
    if n == 0:
        raise InputError("cannot evaluate an empty prediction set")

    label_auc = [_auc_fraction(scores[:, j], targets[:, j]) for j in range(c)]
    skipped = sum(f is None for f in label_auc)
    if skipped:
        log.warning("%d label(s) have a single class; skipped for macro AUC", skipped)
    sample_auc = [_auc_fraction(scores[i], targets[i]) for i in range(n)]

    pred = (scores >= threshold).astype(np.int64)
    tp = pred * targets
    fp = pred * (1 - targets)
    fn = (1 - pred) * targets
    # every metric is a mean of ratios of counts; averaging them exactly makes
    # the result independent of summation order
    return {
        "macro_auc": _mean(label_auc),
        "sample_auc": _mean(sample_auc),
        "instance_acc": float(Fraction(int(np.all(pred == targets, axis=1).sum()), n)),
        "sample_acc": float(Fraction(int((pred == targets).sum()), n * c)),
        "macro_f1": _mean([_f1(*map(int, t)) for t in zip(tp.sum(0), fp.sum(0), fn.sum(0))]),
        "sample_f1": _mean([_f1(*map(int, t)) for t in zip(tp.sum(1), fp.sum(1), fn.sum(1))]),
    }
