"""Independent reference implementations used by the tests.

Each oracle is written the slow, obvious way (explicit loops, exact or
extended-precision arithmetic) and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of every array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def brute_auc(scores, targets):
    """Pair counting with exact arithmetic; ``None`` if a class is missing."""
    pos = [s for s, t in zip(scores, targets) if t == 1]
    neg = [s for s, t in zip(scores, targets) if t == 0]
    if not pos or not neg:
        return None
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            wins += 1 if p > n else Fraction(1, 2) if p == n else 0
    return wins / (len(pos) * len(neg))


def brute_f1(pred, true):
    tp = sum(1 for p, t in zip(pred, true) if p and t)
    fp = sum(1 for p, t in zip(pred, true) if p and not t)
    fn = sum(1 for p, t in zip(pred, true) if not p and t)
    if tp + fp + fn == 0:
        return Fraction(1)
    return Fraction(2 * tp, 2 * tp + fp + fn)


def _exact_avg(values):
    values = [v for v in values if v is not None]
    return float(sum(values, Fraction(0)) / len(values)) if values else math.nan


def brute_metrics(scores, targets, tau=0.5):
    """All six metrics by direct counting, each an exactly averaged fraction."""
    scores = np.asarray(scores, float)
    targets = np.asarray(targets, int)
    n, c = scores.shape
    pred = [[1 if scores[i, j] >= tau else 0 for j in range(c)] for i in range(n)]
    exact = sum(1 for i in range(n) if all(pred[i][j] == targets[i, j] for j in range(c)))
    return {
        "macro_auc": _exact_avg(brute_auc(scores[:, j], targets[:, j]) for j in range(c)),
        "sample_auc": _exact_avg(brute_auc(scores[i], targets[i]) for i in range(n)),
        "instance_acc": float(Fraction(exact, n)),
        "sample_acc": _exact_avg(Fraction(sum(pred[i][j] == targets[i, j] for j in range(c)), c) for i in range(n)),
        "macro_f1": _exact_avg(brute_f1([pred[i][j] for i in range(n)], targets[:, j]) for j in range(c)),
        "sample_f1": _exact_avg(brute_f1(pred[i], targets[i]) for i in range(n)),
    }


def brute_diameter(h):
    h = np.asarray(h, float)
    best = 0.0
    for x, y in itertools.combinations(range(len(h)), 2):
        best = max(best, math.sqrt(sum((a - b) ** 2 for a, b in zip(h[x], h[y]))))
    return best


def brute_dobrushin(a):
    a = np.asarray(a, float)
    n = len(a)
    worst = math.inf
    for i in range(n):
        for j in range(n):
            worst = min(worst, sum(min(a[i, k], a[j, k]) for k in range(a.shape[1])))
    return 1.0 - worst


def entropy_mp(attn):
    """AAE of (H, N, N) attention in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    h, n, _ = attn.shape
    total = mpmath.mpf(0)
    for a in attn.reshape(-1, n):
        for v in a:
            v = mpmath.mpf(float(v))
            if v > 0:
                total -= v * mpmath.log(v)
    return float(total / (h * n * mpmath.log(n)))


def bce_mp(logits, targets):
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for z, o in zip(np.ravel(logits), np.ravel(targets)):
        s = 1 / (1 + mpmath.exp(-mpmath.mpf(float(z))))
        total -= o * mpmath.log(s) + (1 - o) * mpmath.log(1 - s)
    return float(total / np.size(logits))


def random_stochastic(rng, n, m=None, sparsity=0.0):
    m = n if m is None else m
    a = rng.random((n, m)) ** rng.uniform(0.5, 4)
    if sparsity:
        a *= rng.random((n, m)) > sparsity
        a[np.arange(n), rng.integers(0, m, n)] += 1e-3
    return a / a.sum(axis=1, keepdims=True)


def exact_mean(values):
    return float(sum(Fraction(float(v)) for v in values) / len(values))


# ---------------------------------------------------------------------------
# straight-line transformer reference (one sample at a time, explicit heads)
# ---------------------------------------------------------------------------


def ref_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _ref_msa(s, pre, x, heads):
    t, d = x.shape
    dk = d // heads
    q, k, v = x @ s[pre + "attn.wq"], x @ s[pre + "attn.wk"], x @ s[pre + "attn.wv"]
    outs, maps = [], []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        logits = q[:, cols] @ k[:, cols].T / math.sqrt(dk)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        maps.append(a)
        outs.append(a @ v[:, cols])
    return np.concatenate(outs, axis=1) @ s[pre + "attn.wo"], maps


def _ref_ffn(s, pre, y):
    hid = ref_gelu(y @ s[pre + "fc1.weight"] + s[pre + "fc1.bias"])
    return hid @ s[pre + "fc2.weight"] + s[pre + "fc2.bias"]


def ref_block(s, pre, x, heads, pre_norm=False):
    """One block on a (T, D) sequence; returns (out, [attn per head])."""
    ln1 = lambda z: ref_layer_norm(z, s[pre + "norm1.gamma"], s[pre + "norm1.beta"])  # noqa: E731
    ln2 = lambda z: ref_layer_norm(z, s[pre + "norm2.gamma"], s[pre + "norm2.beta"])  # noqa: E731
    if pre_norm:
        msa, maps = _ref_msa(s, pre, ln1(x), heads)
        y = x + msa
        return y + _ref_ffn(s, pre, ln2(y)), maps
    msa, maps = _ref_msa(s, pre, x, heads)
    y = ln1(x + msa)
    return ln2(y + _ref_ffn(s, pre, y)), maps


def ref_tokens(s, patches, slots=None):
    """Embed one sample's (C, N, P) patches into the lead-major token list.

    ``slots`` optionally lists, per lead, which slots (0 and N + 1 are SEP)
    to keep.
    """
    c, n, _ = patches.shape
    rows = []
    for lead in range(c):
        keep = range(n + 2) if slots is None else slots[lead]
        for slot in keep:
            if slot == 0 or slot == n + 1:
                base = s["sep"]
            else:
                base = patches[lead, slot - 1] @ s["patch_embed.weight"] + s["patch_embed.bias"]
            rows.append(base + s["pos_embed"][slot] + s["lead_embed"][lead])
    return np.array(rows)


def ref_stack(s, x, depth, heads, prefix="blocks", pre_norm=False):
    hidden, attn = [], []
    for layer in range(depth):
        x, maps = ref_block(s, f"{prefix}.{layer}.", x, heads, pre_norm)
        hidden.append(x)
        attn.append(maps)
    return hidden, attn


def ref_masked_reconstruction(s, patches, visible, masked, depth, heads, dec_depth, dec_heads, pooled=False,
                              dec_pre_norm=False):
    """Reconstruct one sample's masked patches straight from a model state dict."""
    c, n, _ = patches.shape
    enc = {k[len("encoder."):]: v for k, v in s.items() if k.startswith("encoder.")}
    dec = {k[len("decoder."):]: v for k, v in s.items() if k.startswith("decoder.")}
    slots = [[0] + [int(p) + 1 for p in sorted(visible[lead])] + [n + 1] for lead in range(c)]
    x = ref_tokens(enc, patches, slots)
    hidden, _ = ref_stack(enc, x, depth, heads)
    y = sum(hidden) / len(hidden) if pooled else hidden[-1]
    out = []
    row = 0
    for lead in range(c):
        seq = np.zeros((n + 2, dec["proj.weight"].shape[1]))
        seq[:] = dec["mask_token"]
        for slot in slots[lead]:
            seq[slot] = y[row] @ dec["proj.weight"] + dec["proj.bias"]
            row += 1
        seq = seq + dec["pos_embed"]
        z, _ = ref_stack(dec, seq, dec_depth, dec_heads, pre_norm=dec_pre_norm)
        z = z[-1] if dec_depth else seq
        if dec_pre_norm:
            z = ref_layer_norm(z, dec["norm.gamma"], dec["norm.beta"])
        out.append([z[int(p) + 1] @ dec["head.weight"] + dec["head.bias"] for p in sorted(masked[lead])])
    return np.array(out)
