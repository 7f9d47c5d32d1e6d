"""Representation-collapse diagnostics.

Diameter of a token set, the Dobrushin coefficient of an attention matrix,
the averaging bound relating the two, contraction along attention-only
chains, within-lead cosine similarity and normalised attention entropy.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .backbone import LayerActivations, TokenLayout
from .errors import InputError, UsageError

log = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-6
BOUND_SLACK = 1e-9


def diameter(h) -> float:
    """Largest Euclidean distance between two rows of ``h``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise InputError(f"diameter needs at least two rows, got shape {h.shape}")
    return float(pdist(h).max())


def _check_stochastic(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"expected a 2-D stochastic matrix, got shape {a.shape}")
    if a.min(initial=0.0) < -1e-9 or np.abs(a.sum(axis=1) - 1.0).max(initial=0.0) > STOCHASTIC_TOL:
        raise InputError("matrix is not row-stochastic within tolerance")
    return np.clip(a, 0.0, None)


def dobrushin(a) -> float:
    """``1 - min_{i,j} sum_k min(a_ik, a_jk)`` over all row pairs, clipped to [0, 1]."""
    a = _check_stochastic(a)
    overlap = np.minimum(a[:, None, :], a[None, :, :]).sum(axis=-1)
    return float(np.clip(1.0 - overlap.min(), 0.0, 1.0))


def lemma1_gap(a, b, i, j):
    """Both sides of the averaging bound for rows ``i`` and ``j``.

    Returns ``(lhs, rhs)`` with ``lhs = ||(a_i - a_j) b||`` and
    ``rhs = dobrushin(a) * diameter(b)``.
    """
    a = _check_stochastic(a)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != a.shape[1]:
        raise InputError(f"value rows {b.shape} do not match attention {a.shape}")
    if not (0 <= i < a.shape[0] and 0 <= j < a.shape[0]):
        raise InputError(f"row indices ({i}, {j}) out of range")
    lhs = float(np.linalg.norm(a[i] @ b - a[j] @ b))
    rhs = dobrushin(a) * diameter(b) if b.shape[0] > 1 else 0.0
    return lhs, rhs


@dataclass
class ContractionReport:
    diameters: list  # Delta(H^l) for l = 0..L
    deltas: list  # per layer: per-head Dobrushin coefficients
    product_bound: list  # prod_{m<=l} max_h delta_m * Delta(H^0)
    satisfied: list | None = None  # stepwise bound flags (attention-only chains)

    @property
    def delta_max(self):
        return [float(np.max(d)) for d in self.deltas]

    def rows(self):
        return [
            {"layer": l + 1, "delta_H": self.diameters[l + 1], "delta_A_max": self.delta_max[l],
             "product_bound": self.product_bound[l]}
            for l in range(len(self.deltas))
        ]


def contraction_chain(a_list, h0) -> ContractionReport:
    """Propagate ``H^(l+1) = A^(l) H^(l)`` and check the stepwise contraction bound."""
    h = np.asarray(h0, dtype=np.float64)
    diam = [diameter(h)]
    deltas, bound, flags = [], [], []
    running = diam[0]
    for l, a in enumerate(a_list):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != h.shape[0]:
            raise InputError(f"layer {l + 1}: attention {a.shape} cannot act on {h.shape[0]} rows")
        d = dobrushin(a)
        h = a @ h
        diam.append(diameter(h))
        flags.append(diam[-1] <= d * diam[-2] + BOUND_SLACK)
        running *= d
        deltas.append([d])
        bound.append(running)
    return ContractionReport(diam, deltas, bound, flags)


def model_contraction(activations: LayerActivations, embeddings, sample=0) -> ContractionReport:
    """Measured diameters and per-head coefficients of a real forward pass.

    Residual connections, feed-forward layers and normalisation break the
    attention-only bound, so no satisfaction flags are produced here.
    """
    h0 = np.asarray(getattr(embeddings, "data", embeddings))[sample]
    diam = [diameter(h0)]
    deltas, bound = [], []
    running = diam[0]
    for h, attn in zip(activations.hidden_arrays(), activations.attention):
        diam.append(diameter(h[sample]))
        per_head = [dobrushin(a) for a in attn[sample]]
        deltas.append(per_head)
        running *= max(per_head)
        bound.append(running)
    return ContractionReport(diam, deltas, bound, None)


def _cosine_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    if zero.any():
        log.warning("%d zero-norm token row(s); their cosine similarity is taken as 0", int(zero.sum()))
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return np.clip(unit @ np.swapaxes(unit, -1, -2), -1.0, 1.0), zero


@dataclass
class SimilarityProfile:
    per_lead: np.ndarray  # (depth, C): mean within-lead pair cosine, averaged over samples
    per_lead_std: np.ndarray  # (depth, C): std over samples

    @property
    def mean(self):
        return self.per_lead.mean(axis=1)

    @property
    def std(self):
        return self.per_lead.std(axis=1)

    def rows(self):
        out = []
        for l in range(self.per_lead.shape[0]):
            for c in range(self.per_lead.shape[1]):
                out.append({"layer": l + 1, "lead": c, "mean_cos": self.per_lead[l, c],
                            "std_cos": self.per_lead_std[l, c]})
            out.append({"layer": l + 1, "lead": "all", "mean_cos": self.mean[l], "std_cos": self.std[l]})
        return out


def lead_mean_cosine(tokens) -> float:
    """Mean cosine over unordered pairs of rows (zero-norm rows count as 0)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    n = tokens.shape[0]
    if n < 2:
        raise InputError("need at least two tokens for a pairwise mean")
    cos, _ = _cosine_matrix(tokens)
    iu = np.triu_indices(n, 1)
    return float(cos[iu].mean())


def avg_cosine(activations: LayerActivations, layout: TokenLayout | None = None) -> SimilarityProfile:
    """Within-lead mean pairwise cosine of non-SEP tokens, per layer and lead."""
    layout = layout or activations.layout
    if layout is None:
        raise UsageError("activations carry no token layout")
    hidden = activations.hidden_arrays()
    depth, leads = len(hidden), layout.leads
    mean = np.zeros((depth, leads))
    std = np.zeros((depth, leads))
    for l, h in enumerate(hidden):
        for c in range(leads):
            rows = np.flatnonzero((layout.lead == c) & ~layout.is_sep)
            x = h[:, rows, :]
            cos, _ = _cosine_matrix(x)
            iu = np.triu_indices(len(rows), 1)
            per_sample = cos[:, iu[0], iu[1]].mean(axis=-1)
            mean[l, c] = per_sample.mean()
            std[l, c] = per_sample.std()
    return SimilarityProfile(mean, std)


@dataclass
class SimilarityMap:
    query: int
    layer: int
    values: np.ndarray  # (C, N) cosine against the query, lead-major


def cosine_map(activations: LayerActivations, layer: int, query_token: int, sample=0,
               layout: TokenLayout | None = None) -> SimilarityMap:
    """Cosine of one non-SEP token against every non-SEP token at ``layer`` (1-based)."""
    layout = layout or activations.layout
    if layout is None:
        raise UsageError("activations carry no token layout")
    if not 1 <= layer <= activations.depth:
        raise UsageError(f"layer {layer} outside 1..{activations.depth}")
    if not 0 <= query_token < len(layout) or layout.is_sep[query_token]:
        raise UsageError(f"query token {query_token} is not a patch token")
    h = np.asarray(activations.hidden_arrays()[layer - 1][sample], dtype=np.float64)
    keep = layout.non_sep
    norms = np.linalg.norm(h, axis=-1)
    q = h[query_token]
    denom = norms[keep] * norms[query_token]
    cos = np.divide(h[keep] @ q, denom, out=np.zeros(len(keep)), where=denom > 0)
    values = np.clip(cos, -1.0, 1.0)
    # the query itself is exactly 1 unless it has zero norm
    self_pos = np.flatnonzero(keep == query_token)[0]
    if norms[query_token] > 0:
        values[self_pos] = 1.0
    grid = np.zeros((layout.leads, layout.n_patches))
    grid[layout.lead[keep], layout.patch[keep]] = values
    return SimilarityMap(query_token, layer, grid)


@dataclass
class EntropyProfile:
    per_head: np.ndarray  # (depth, H)

    @property
    def per_layer(self):
        return self.per_head.mean(axis=1)

    def rows(self):
        return [{"layer": l + 1, "head": h, "aae": self.per_head[l, h]}
                for l in range(self.per_head.shape[0]) for h in range(self.per_head.shape[1])]


def attention_entropy(attention) -> np.ndarray:
    """Average attention entropy normalised by ``log N``.

    ``attention`` is ``(..., H, N, N)``; the result has shape ``(..., H)``
    (entropy averaged over query rows). ``0 log 0`` counts as 0.
    """
    a = np.asarray(attention, dtype=np.float64)
    n = a.shape[-1]
    if n < 2:
        raise InputError("attention entropy is undefined for a single token (log N = 0)")
    if a.min(initial=0.0) < -1e-9 or np.abs(a.sum(axis=-1) - 1.0).max(initial=0.0) > STOCHASTIC_TOL:
        raise InputError("attention rows are not stochastic within tolerance")
    a = np.clip(a, 0.0, 1.0)
    plogp = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    ent = -plogp.sum(axis=-1).mean(axis=-1) / np.log(n)
    return np.clip(ent, 0.0, 1.0)


def entropy_profile(activations: LayerActivations) -> EntropyProfile:
    """Per layer and head AAE, averaged over the batch."""
    return EntropyProfile(np.stack([attention_entropy(a).mean(axis=0) for a in activations.attention]))


def aae(attention) -> float:
    """Single AAE value averaged over heads (and any leading batch axes)."""
    return float(attention_entropy(attention).mean())


@dataclass
class DiagnosticsBundle:
    similarity: SimilarityProfile
    entropy: EntropyProfile
    contraction: ContractionReport
    maps: list = field(default_factory=list)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_map_csv(path, grid, row_labels=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid)
    labels = row_labels or [str(i) for i in range(grid.shape[0])]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lead"] + [str(j) for j in range(grid.shape[1])])
            for label, row in zip(labels, grid):
                w.writerow([label] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
