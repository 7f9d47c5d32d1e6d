"""1D Vision Transformer encoder for fixed-length multi-lead ECG.

Each lead is cut into ``N`` non-overlapping patches of ``P`` samples, framed
by a shared SEP embedding on both ends, and shifted by learnable positional
and lead embeddings. The tokens of all leads form one joint sequence that
passes through a stack of post-norm Transformer blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, InputError, ShapeError, UsageError
from .numcore import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    dropout,
    gelu,
    get_default_dtype,
    softmax,
    swapaxes,
    trunc_normal,
)

CHECKPOINT_VERSION = "ecgsoup-ckpt-v1"
LEAD_NAMES = ("I", "II", "III", "AVR", "AVL", "AVF", "V1", "V2", "V3", "V4", "V5", "V6")


@dataclass
class VitConfig:
    leads: int = 12
    signal_length: int = 1000
    patch_length: int = 50
    embed_dim: int = 64
    depth: int = 12
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.leads < 1 or self.depth < 0 or self.heads < 1 or self.mlp_ratio < 1:
            raise ConfigError(f"invalid model sizes in {self}")
        if self.patch_length < 1 or self.signal_length < self.patch_length:
            raise ConfigError(
                f"signal_length {self.signal_length} must be at least patch_length {self.patch_length}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def num_patches(self) -> int:
        return self.signal_length // self.patch_length

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def tokens_per_lead(self) -> int:
        return self.num_patches + 2

    @classmethod
    def tiny(cls, **overrides):
        """Gradient-check profile: D=8, two layers, two heads."""
        base = dict(embed_dim=8, depth=2, heads=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def sincos_table(positions: int, dim: int) -> np.ndarray:
    """Fixed 1D sine/cosine position table of shape ``(positions, dim)``.

    Used to initialise the (learnable) positional embeddings.
    """
    half = dim // 2
    freq = 1.0 / 10000.0 ** (np.arange(half) / max(half, 1))
    angle = np.arange(positions)[:, None] * freq[None, :]
    table = np.zeros((positions, dim))
    table[:, :half] = np.sin(angle)
    table[:, half : 2 * half] = np.cos(angle)
    return table.astype(get_default_dtype())


def patchify(signal, patch_length: int) -> np.ndarray:
    """Split ``(..., C, L)`` samples into ``(..., C, L // P, P)`` patches.

    The trailing ``L mod P`` samples are dropped.
    """
    signal = np.asarray(signal)
    length = signal.shape[-1]
    if length < patch_length:
        raise InputError(f"signal length {length} is shorter than patch length {patch_length}")
    n = length // patch_length
    return signal[..., : n * patch_length].reshape(*signal.shape[:-1], n, patch_length)


@dataclass(frozen=True)
class TokenLayout:
    """Flat token index <-> (lead, slot) bookkeeping for one sample.

    Slot 0 and slot ``n_patches + 1`` of every lead are SEP tokens; slot
    ``p + 1`` holds patch ``p``.
    """

    leads: int
    n_patches: int
    lead: np.ndarray = field(repr=False)
    slot: np.ndarray = field(repr=False)

    @classmethod
    def full(cls, leads, n_patches):
        per = n_patches + 2
        lead = np.repeat(np.arange(leads), per)
        slot = np.tile(np.arange(per), leads)
        return cls(leads, n_patches, lead, slot)

    @classmethod
    def visible(cls, n_patches, visible):
        """Layout of a masked sequence; ``visible`` is (C, S) zero-based patch ids."""
        visible = np.asarray(visible)
        leads, s = visible.shape
        slots = np.concatenate(
            [np.zeros((leads, 1), int), np.sort(visible, axis=1) + 1, np.full((leads, 1), n_patches + 1)], axis=1
        )
        lead = np.repeat(np.arange(leads), s + 2)
        return cls(leads, n_patches, lead, slots.reshape(-1))

    def __len__(self):
        return len(self.lead)

    @property
    def is_sep(self) -> np.ndarray:
        return (self.slot == 0) | (self.slot == self.n_patches + 1)

    @property
    def non_sep(self) -> np.ndarray:
        return np.flatnonzero(~self.is_sep)

    @property
    def patch(self) -> np.ndarray:
        """Zero-based patch id per token, -1 for SEP tokens."""
        return np.where(self.is_sep, -1, self.slot - 1)

    def index(self, lead: int, slot: int) -> int:
        hits = np.flatnonzero((self.lead == lead) & (self.slot == slot))
        if len(hits) != 1:
            raise KeyError(f"no token at lead {lead}, slot {slot}")
        return int(hits[0])

    def patch_token(self, lead: int, patch: int) -> int:
        return self.index(lead, patch + 1)


def strip_sep(hidden, layout: TokenLayout):
    """Drop the SEP rows of ``(..., T, D)`` representations, keeping order."""
    rows = hidden.shape[-2]
    if rows != len(layout):
        raise UsageError(f"representation has {rows} tokens but layout describes {len(layout)}")
    keep = layout.non_sep
    if isinstance(hidden, Tensor):
        return hidden[(slice(None),) * (hidden.ndim - 2) + (keep,)]
    return np.asarray(hidden)[..., keep, :]


@dataclass
class LayerActivations:
    """Per-layer outputs ``hidden[l]`` (B, T, D) and attention ``attention[l]`` (B, H, T, T)."""

    hidden: list
    attention: list
    layout: TokenLayout | None = None

    @property
    def depth(self) -> int:
        return len(self.hidden)

    def hidden_arrays(self):
        return [h.data if isinstance(h, Tensor) else np.asarray(h) for h in self.hidden]


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        self.heads = heads
        self.wq = Parameter(trunc_normal(rng, (dim, dim)))
        self.wk = Parameter(trunc_normal(rng, (dim, dim)))
        self.wv = Parameter(trunc_normal(rng, (dim, dim)))
        self.wo = Parameter(trunc_normal(rng, (dim, dim)))

    def _split(self, x, b, t):
        d = x.shape[-1] // self.heads
        return x.reshape(b, t, self.heads, d).transpose(0, 2, 1, 3)

    def __call__(self, x):
        b, t, dim = x.shape
        dk = dim // self.heads
        q = self._split(x @ self.wq, b, t)
        k = self._split(x @ self.wk, b, t)
        v = self._split(x @ self.wv, b, t)
        scores = (q @ swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
        attn = softmax(scores, axis=-1)
        heads = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, dim)
        return heads @ self.wo, attn.data


class TransformerBlock(Module):
    """Post-norm block: LN(x + MSA(x)) followed by LN(y + FFN(y)).

    With ``pre_norm=True`` the normalisations move inside the residual
    branches instead: ``y = x + MSA(LN(x))``, ``y + FFN(LN(y))``.
    """

    def __init__(self, dim, heads, hidden, rng, dropout=0.0, pre_norm=False):
        super().__init__()
        self.pre_norm = pre_norm
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.dropout = dropout

    def __call__(self, x, rng=None):
        if self.pre_norm:
            msa, attn = self.attn(self.norm1(x))
            y = x + dropout(msa, self.dropout, self.training, rng)
            ffn = self.fc2(gelu(self.fc1(self.norm2(y))))
            return y + dropout(ffn, self.dropout, self.training, rng), attn
        msa, attn = self.attn(x)
        y = self.norm1(x + dropout(msa, self.dropout, self.training, rng))
        ffn = self.fc2(gelu(self.fc1(y)))
        return self.norm2(y + dropout(ffn, self.dropout, self.training, rng)), attn


def run_blocks(blocks, tokens, capture=False, rng=None):
    """Apply ``blocks`` in order; optionally record every output and attention map."""
    x = as_tensor(tokens)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    hidden, attention = [], []
    for block in blocks:
        x, attn = block(x, rng)
        if capture:
            hidden.append(x)
            attention.append(attn)
    return x, (LayerActivations(hidden, attention) if capture else None)


class VitEncoder(Module):
    """Patch/SEP/position/lead embeddings plus the encoder block stack."""

    def __init__(self, config: VitConfig, rng):
        super().__init__()
        self.config = config
        c, n, p, d = config.leads, config.num_patches, config.patch_length, config.embed_dim
        self.patch_embed = Linear(p, d, rng)
        self.sep = Parameter(trunc_normal(rng, (d,)))
        self.pos_embed = Parameter(sincos_table(n + 2, d))
        self.lead_embed = Parameter(trunc_normal(rng, (c, d)))
        hidden = config.mlp_ratio * d
        self.blocks = [TransformerBlock(d, config.heads, hidden, rng, config.dropout) for _ in range(config.depth)]

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout.full(self.config.leads, self.config.num_patches)

    def embed(self, patches) -> Tensor:
        """Map ``(B, C, N, P)`` patches to ``(B, C, N + 2, D)`` embeddings."""
        cfg = self.config
        patches = as_tensor(patches)
        if patches.ndim == 3:
            patches = patches.reshape(1, *patches.shape)
        expect = (cfg.leads, cfg.num_patches, cfg.patch_length)
        if patches.ndim != 4 or patches.shape[1:] != expect:
            raise ConfigError(f"patches of shape {patches.shape} do not match model (B, {expect})")
        b = patches.shape[0]
        y0 = self.patch_embed(patches)
        sep = broadcast_to(self.sep.reshape(1, 1, 1, cfg.embed_dim), (b, cfg.leads, 1, cfg.embed_dim))
        framed = concat([sep, y0, sep], axis=2)
        framed = framed + self.pos_embed
        return framed + self.lead_embed.reshape(1, cfg.leads, 1, cfg.embed_dim)

    def embed_tokens(self, patches) -> Tensor:
        y = self.embed(patches)
        b, c, t, d = y.shape
        return y.reshape(b, c * t, d)

    def encode(self, tokens, capture=False, rng=None):
        """Run the block stack over ``(B, T, D)`` tokens; returns ``(H_final, activations)``."""
        if self.training and self.config.dropout > 0 and rng is None:
            raise ConfigError("encoder dropout in train mode needs a random generator")
        return run_blocks(self.blocks, tokens, capture, rng)

    def forward_signals(self, signals, capture=False, rng=None):
        """Patchify ``(B, C, L)`` signals and encode the full, unmasked layout."""
        patches = patchify(signals, self.config.patch_length)
        out, acts = self.encode(self.embed_tokens(patches), capture, rng)
        if acts is not None:
            acts.layout = self.layout
        return out, acts


def encoder_forward(encoder: VitEncoder, tokens, capture=False, rng=None):
    return encoder.encode(tokens, capture, rng)


def embed(encoder: VitEncoder, patches) -> Tensor:
    return encoder.embed(patches)


def save_checkpoint(path, state, meta=None) -> None:
    """Write a name->array map as an ``ecgsoup-ckpt-v1`` container."""
    write_container(path, CHECKPOINT_VERSION, state, meta)


def load_checkpoint(path):
    """Return ``(state, meta)`` from an ``ecgsoup-ckpt-v1`` container."""
    state, header = read_container(path, CHECKPOINT_VERSION)
    return state, header.get("meta", {})


def load_encoder(path, prefix="encoder."):
    """Rebuild a :class:`VitEncoder` from a checkpoint written by pretraining."""
    state, meta = load_checkpoint(path)
    if "vit" not in meta:
        raise InputError(f"{path}: checkpoint has no model configuration")
    config = VitConfig.from_dict(meta["vit"])
    dtype = next(iter(state.values())).dtype if state else np.float64
    from .numcore import precision

    with precision(dtype):
        encoder = VitEncoder(config, np.random.default_rng(0))
    sub = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
    if not sub:
        raise ShapeError(f"{path}: no tensors with prefix {prefix!r}")
    encoder.load_state_dict(sub)
    return encoder, meta
