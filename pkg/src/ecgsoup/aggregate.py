"""Layer aggregation, the classification head and the downstream training drivers.

The encoder's per-layer token outputs are reduced to one D-vector per layer
(mean over non-SEP tokens). A sample representation is then either a single
layer, the plain mean over layers (``ppa``) or a gated, per-sample weighted
mean (``pma``). Linear probing trains the head (and gate) on frozen, possibly
cached summaries; fine-tuning backpropagates into the encoder as well.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import LayerActivations, TokenLayout, VitEncoder, patchify
from .container import read_container, write_container
from .data.folds import check_disjoint
from .data.metrics import METRIC_NAMES, evaluate
from .errors import ConfigError, InputError, UsageError
from .numcore import (
    AdamW,
    BatchNorm1d,
    Linear,
    LrSchedule,
    Module,
    Tensor,
    as_tensor,
    backward,
    bce_with_logits,
    check_finite,
    dropout,
    lr_at,
    no_grad,
    relu,
    sigmoid,
    softmax,
)

log = logging.getLogger(__name__)

ACTIVATION_VERSION = "ecgsoup-act-v1"
SWEEP_COLUMNS = ("layer",) + METRIC_NAMES
METRICS_COLUMNS = ("fold", "seed", "task", "mode") + METRIC_NAMES


# ---------------------------------------------------------------------------
# layer summaries and aggregation
# ---------------------------------------------------------------------------


def layer_summaries(activations: LayerActivations, layout: TokenLayout | None = None):
    """Per-layer mean over non-SEP tokens.

    Returns a ``(B, depth, D)`` Tensor when the captured outputs are tensors
    (so gradients reach the encoder), else an ndarray.
    """
    if activations is None or not activations.hidden:
        raise UsageError("layer summaries need captured activations for every layer")
    layout = layout or activations.layout
    if layout is None:
        raise UsageError("activations carry no token layout")
    keep = layout.non_sep
    rows = []
    for h in activations.hidden:
        if h.shape[-2] != len(layout):
            raise UsageError(f"activation has {h.shape[-2]} tokens, layout has {len(layout)}")
        rows.append(h[:, keep, :].mean(axis=1) if isinstance(h, Tensor) else np.asarray(h)[:, keep, :].mean(axis=1))
    if isinstance(rows[0], Tensor):
        from .numcore import stack

        return stack(rows, axis=1)
    return np.stack(rows, axis=1)


sample_representation = layer_summaries


def ppa_aggregate(summaries):
    """Unweighted mean over the layer axis of ``(..., depth, D)`` summaries."""
    if summaries.shape[-2] < 1:
        raise ConfigError("aggregation needs at least one layer")
    if isinstance(summaries, Tensor):
        return summaries.mean(axis=-2)
    return np.asarray(summaries).mean(axis=-2)


class GateNetwork(Module):
    """Linear map from the mean layer summary to per-layer softmax weights."""

    def __init__(self, dim, depth, rng):
        super().__init__()
        self.depth = depth
        self.proj = Linear(dim, depth, rng)

    def logits(self, summaries):
        summaries = as_tensor(summaries)
        return self.proj(summaries.mean(axis=-2))

    def __call__(self, summaries):
        """Weights of shape ``(B, depth)``; each row sums to one."""
        return softmax(self.logits(summaries), axis=-1)

    def freeze_uniform(self):
        """Zero the map so every sample gets weight ``1/depth`` per layer; stop training it."""
        self.proj.weight.assign(np.zeros_like(self.proj.weight.data))
        self.proj.bias.assign(np.zeros_like(self.proj.bias.data))
        self.set_trainable(False)
        return self


def pma_aggregate(summaries, gate: GateNetwork):
    """Gate-weighted sum over layers; returns ``(vectors, weights)``."""
    summaries = as_tensor(summaries)
    if summaries.shape[-2] != gate.depth:
        raise ConfigError(f"gate expects {gate.depth} layers, summaries have {summaries.shape[-2]}")
    w = gate(summaries)
    b, depth = w.shape
    vec = (w.reshape(b, 1, depth) @ summaries).reshape(b, summaries.shape[-1])
    return vec, w.data


_MODE_RE = re.compile(r"^(?:layer:(\d+)|last|ppa|pma)$")


@dataclass(frozen=True)
class AggregationMode:
    """``single`` (one layer, 1-based), ``ppa``, ``pma`` or unresolved ``last``."""

    kind: str
    layer: int | None = None

    @classmethod
    def parse(cls, text, depth: int | None = None):
        """Parse ``"ppa"``, ``"pma"``, ``"last"`` or ``"layer:k"``."""
        if isinstance(text, AggregationMode):
            mode = text
            if mode.kind == "last" and depth is not None:
                mode = cls("single", depth)
        else:
            text = str(text).strip().lower()
            m = _MODE_RE.match(text)
            if not m:
                raise ConfigError(f"aggregation must be last, ppa, pma or layer:k, got {text!r}")
            if m.group(1):
                mode = cls("single", int(m.group(1)))
            elif text == "last":
                # resolved to a concrete layer once the depth is known
                mode = cls("last") if depth is None else cls("single", depth)
            else:
                mode = cls(text)
        if depth is not None:
            mode.check(depth)
        return mode

    def check(self, depth):
        if self.kind == "last":
            raise ConfigError("'last' must be resolved against the encoder depth first")
        if self.kind == "single" and not 1 <= self.layer <= depth:
            raise ConfigError(f"layer {self.layer} outside 1..{depth}")

    def __str__(self):
        return f"layer:{self.layer}" if self.kind == "single" else self.kind


class ClassifierHead(Module):
    """BatchNorm -> dropout -> (optional hidden linear + ReLU) -> linear."""

    def __init__(self, dim, n_labels, rng, dropout_rate=0.0, hidden=False):
        super().__init__()
        if n_labels < 1:
            raise ConfigError("the head needs at least one label")
        self.norm = BatchNorm1d(dim)
        self.hidden = Linear(dim, dim, rng) if hidden else None
        self.out = Linear(dim, n_labels, rng)
        self.dropout_rate = dropout_rate

    def __call__(self, x, rng=None):
        y = dropout(self.norm(x), self.dropout_rate, self.training, rng)
        if self.hidden is not None:
            y = relu(self.hidden(y))
        return self.out(y)


class Aggregator(Module):
    """Reduces ``(B, depth, D)`` summaries to ``(B, D)`` according to a mode."""

    def __init__(self, mode: AggregationMode, dim, depth, rng):
        super().__init__()
        mode.check(depth)
        self.mode = mode
        self.gate = GateNetwork(dim, depth, rng) if mode.kind == "pma" else None
        self.last_weights = None

    def __call__(self, summaries):
        summaries = as_tensor(summaries)
        if self.mode.kind == "single":
            return summaries[:, self.mode.layer - 1, :]
        if self.mode.kind == "ppa":
            return ppa_aggregate(summaries)
        vec, self.last_weights = pma_aggregate(summaries, self.gate)
        return vec


def bce_multilabel_loss(logits, targets):
    """Mean binary cross-entropy over all labels, evaluated in log space."""
    return bce_with_logits(logits, targets)


# ---------------------------------------------------------------------------
# activation cache
# ---------------------------------------------------------------------------


def compute_summaries(encoder: VitEncoder, signals, batch_size=64):
    """Frozen-encoder ``(n, depth, D)`` summaries of ``(n, C, L)`` signals."""
    signals = np.asarray(signals)
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(signals), batch_size):
                _, acts = encoder.forward_signals(signals[start : start + batch_size], capture=True)
                s = layer_summaries(acts)
                out.append(s.data if isinstance(s, Tensor) else s)
    finally:
        encoder.train(was_training)
    depth, dim = encoder.config.depth, encoder.config.embed_dim
    return np.concatenate(out) if out else np.empty((0, depth, dim))


def write_activation_cache(path, ids, summaries, meta=None):
    """Store ``(n, depth, D)`` summaries keyed by ``<record id>/<layer>`` (1-based)."""
    summaries = np.asarray(summaries)
    if len(ids) != len(summaries):
        raise InputError(f"{len(ids)} ids for {len(summaries)} summaries")
    tensors = {f"{rid}/{l + 1}": summaries[i, l] for i, rid in enumerate(ids) for l in range(summaries.shape[1])}
    meta = dict(meta or {}, ids=list(ids), depth=int(summaries.shape[1]))
    write_container(path, ACTIVATION_VERSION, tensors, meta)


def read_activation_cache(path):
    """Return ``(ids, summaries, meta)``."""
    tensors, header = read_container(path, ACTIVATION_VERSION)
    meta = header.get("meta", {})
    ids, depth = meta["ids"], meta["depth"]
    if not ids:
        return [], np.empty((0, depth, 0)), meta
    summaries = np.stack([np.stack([tensors[f"{rid}/{l + 1}"] for l in range(depth)]) for rid in ids])
    return ids, summaries, meta


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------


@dataclass
class DownstreamConfig:
    mode: str = "linear_probe"  # or "finetune"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    warmup_epochs: int | None = None  # None: 0 for probing, 5 for fine-tuning
    schedule: str | None = None  # None: constant for probing, cosine for fine-tuning
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    dropout: float = 0.0
    hidden: bool = False
    threshold: float = 0.5
    encoder_lr_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("linear_probe", "finetune"):
            raise ConfigError(f"mode must be linear_probe or finetune, got {self.mode!r}")
        if self.warmup_epochs is None:
            self.warmup_epochs = 5 if self.mode == "finetune" else 0
        if self.schedule is None:
            self.schedule = "cosine" if self.mode == "finetune" else "constant"
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"invalid training sizes in {self}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.encoder_lr_scale < 0:
            raise ConfigError("encoder_lr_scale must be non-negative")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown downstream keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass
class DownstreamResult:
    head: ClassifierHead
    aggregator: Aggregator
    losses: list = field(default_factory=list)
    val_metrics: dict | None = None
    test_metrics: dict | None = None
    test_scores: np.ndarray | None = None
    gate_weights: np.ndarray | None = None
    encoder: VitEncoder | None = None


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    chunks = [order[s : s + batch_size] for s in starts]
    # a single-sample tail would give batch norm a zero variance; fold it in
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _fit(features_fn, n_train, y_train, head, aggregator, config, encoder=None, progress=None):
    """Shared optimisation loop; ``features_fn(idx)`` yields ``(B, depth, D)`` summaries."""
    y_train = np.asarray(y_train, dtype=np.float64)
    params, scales = [], []
    for p in head.parameters() + aggregator.parameters():
        params.append(p)
        scales.append(1.0)
    if encoder is not None:
        for p in encoder.parameters():
            params.append(p)
            scales.append(config.encoder_lr_scale)
    opt = AdamW(params, config.betas, config.eps, config.weight_decay, [p.ndim >= 2 for p in params], scales)
    rng = np.random.default_rng([config.seed, 1])
    steps_per_epoch = len(_batches(n_train, config.batch_size, np.random.default_rng(0)))
    total = max(1, steps_per_epoch * config.epochs)
    sched = LrSchedule(config.lr, min(config.warmup_epochs * steps_per_epoch, total), total, config.schedule)
    head.train()
    aggregator.train()
    step, losses = 0, []
    for epoch in range(config.epochs):
        epoch_loss, count = 0.0, 0
        for idx in _batches(n_train, config.batch_size, rng):
            opt.zero_grad()
            logits = head(aggregator(features_fn(idx)), rng)
            loss = bce_multilabel_loss(logits, y_train[idx])
            check_finite(loss, "downstream loss")
            backward(loss)
            opt.step(lr_at(sched, step + 1))
            step += 1
            epoch_loss += loss.item() * len(idx)
            count += len(idx)
        losses.append(epoch_loss / count)
        if progress:
            progress({"epoch": epoch + 1, "loss": losses[-1]})
    head.eval()
    aggregator.eval()
    return losses


def predict_scores(head, aggregator, summaries):
    """Sigmoid probabilities for ``(n, depth, D)`` summaries in eval mode."""
    head.eval()
    aggregator.eval()
    with no_grad():
        logits = head(aggregator(np.asarray(summaries)))
        weights = aggregator.last_weights
        return sigmoid(logits).data, weights


def _score(head, aggregator, summaries, labels, threshold):
    if summaries is None or len(summaries) == 0:
        return None, None, None
    scores, weights = predict_scores(head, aggregator, summaries)
    return evaluate(np.clip(scores, 0.0, 1.0), labels, threshold), scores, weights


def _check_ids(train_ids, val_ids, test_ids):
    groups = {"train": train_ids or [], "validation": val_ids or [], "test": test_ids or []}
    check_disjoint(**groups)


def _build(dim, depth, n_labels, agg, config):
    mode = AggregationMode.parse(agg, depth)
    # separate streams so the head starts identically whatever the aggregation
    head = ClassifierHead(dim, n_labels, np.random.default_rng([config.seed, 0]), config.dropout, config.hidden)
    aggregator = Aggregator(mode, dim, depth, np.random.default_rng([config.seed, 3]))
    return head, aggregator


def probe_train(train, val=None, test=None, agg="ppa", config: DownstreamConfig | None = None,
                head=None, aggregator=None, progress=None) -> DownstreamResult:
    """Train a head on frozen per-layer summaries.

    Parameters
    ----------
    train, val, test : tuple ``(ids, summaries, labels)``
        ``summaries`` has shape ``(n, depth, D)``; ``val`` and ``test`` may be None.
    agg : str or AggregationMode
    """
    config = config or DownstreamConfig()
    train_ids, xs, ys = train
    xs = np.asarray(xs)
    if xs.ndim != 3 or len(xs) != len(ys) or len(xs) == 0:
        raise InputError(f"training summaries must be (n, depth, D) with matching labels, got {xs.shape}")
    _check_ids(train_ids, val and val[0], test and test[0])
    ys = np.asarray(ys)
    if head is None:
        head, aggregator = _build(xs.shape[2], xs.shape[1], ys.shape[1], agg, config)
    losses = _fit(lambda idx: xs[idx], len(xs), ys, head, aggregator, config, progress=progress)
    return _finish(head, aggregator, losses, val, test, config)


def _finish(head, aggregator, losses, val, test, config, encoder=None, summarize=None):
    summarize = summarize or (lambda x: x)
    val_m = _score(head, aggregator, summarize(val[1]), val[2], config.threshold)[0] if val else None
    test_m, scores, weights = _score(head, aggregator, summarize(test[1]), test[2], config.threshold) if test else (None,) * 3
    return DownstreamResult(head, aggregator, losses, val_m, test_m, scores, weights, encoder)


def finetune_train(encoder: VitEncoder, train, val=None, test=None, agg="ppa",
                   config: DownstreamConfig | None = None, progress=None) -> DownstreamResult:
    """Train encoder, aggregation and head end to end on raw signals.

    ``train``/``val``/``test`` are ``(ids, signals, labels)`` with signals of
    shape ``(n, C, L)``. The encoder is updated in place.
    """
    config = config or DownstreamConfig(mode="finetune")
    train_ids, xs, ys = train
    xs = np.asarray(xs)
    if xs.ndim != 3 or len(xs) != len(ys) or len(xs) == 0:
        raise InputError(f"training signals must be (n, C, L) with matching labels, got {xs.shape}")
    _check_ids(train_ids, val and val[0], test and test[0])
    ys = np.asarray(ys)
    cfg = encoder.config
    head, aggregator = _build(cfg.embed_dim, cfg.depth, ys.shape[1], agg, config)
    encoder.set_trainable(True)
    enc_rng = np.random.default_rng([config.seed, 2])
    layout = encoder.layout

    def features(idx):
        encoder.train()
        tokens = encoder.embed_tokens(patchify(xs[idx], cfg.patch_length))
        _, acts = encoder.encode(tokens, capture=True, rng=enc_rng)
        return layer_summaries(acts, layout)

    losses = _fit(features, len(xs), ys, head, aggregator, config, encoder=encoder, progress=progress)
    encoder.eval()
    summarize = lambda signals: compute_summaries(encoder, signals, config.batch_size)  # noqa: E731
    return _finish(head, aggregator, losses, val, test, config, encoder, summarize)


def layerwise_probe_sweep(train, val=None, test=None, config: DownstreamConfig | None = None, out_csv=None):
    """Probe every single layer; one metrics row per layer (test split, else validation)."""
    depth = np.asarray(train[1]).shape[1]
    rows = []
    for k in range(1, depth + 1):
        res = probe_train(train, val, test, f"layer:{k}", config)
        metrics = res.test_metrics or res.val_metrics
        if metrics is None:
            raise InputError("the layer sweep needs a validation or test split to report on")
        rows.append({"layer": k, **metrics})
    if out_csv is not None:
        write_rows(out_csv, SWEEP_COLUMNS, rows)
    return rows


def write_rows(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
