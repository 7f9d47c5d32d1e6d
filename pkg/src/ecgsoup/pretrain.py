"""Spatio-temporal masked pretraining (STMEM) and its layer-pooled variant.

Per lead, a random ``mask_ratio`` share of patches is hidden. The encoder sees
the visible patches of all leads (plus every lead's SEP pair) as one joint
sequence. A lighter decoder, shared across leads but run on each lead's
sequence separately, fills the hidden slots with a learned mask embedding and
regresses the missing samples.

In ``ipastmem`` mode the decoder input is the mean of every encoder layer's
output instead of the last layer alone.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import (
    TransformerBlock,
    VitConfig,
    VitEncoder,
    load_checkpoint,
    patchify,
    run_blocks,
    save_checkpoint,
    sincos_table,
)
from .errors import ConfigError, InputError, NumericError
from .numcore import (
    AdamW,
    Linear,
    LayerNorm,
    LrSchedule,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    backward,
    broadcast_to,
    check_finite,
    concat,
    lr_at,
    mean,
    trunc_normal,
)

log = logging.getLogger(__name__)

MODES = ("stmem", "ipastmem")
LOSS_LOG_HEADER = ("epoch", "step", "loss", "lr")


@dataclass
class MaskPlan:
    """Visible and masked zero-based patch ids per lead.

    ``visible`` has shape ``(..., C, S)`` and ``masked`` ``(..., C, S')``;
    an optional leading axis indexes samples in a batch. SEP slots are never
    part of either set.
    """

    visible: np.ndarray
    masked: np.ndarray
    n_patches: int

    @property
    def ratio(self) -> float:
        return self.masked.shape[-1] / self.n_patches

    @property
    def batched(self) -> bool:
        return self.visible.ndim == 3

    def as_batch(self) -> "MaskPlan":
        if self.batched:
            return self
        return MaskPlan(self.visible[None], self.masked[None], self.n_patches)


def masked_count(n_patches: int, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = int(round(ratio * n_patches))
    if k in (0, n_patches):
        raise ConfigError(f"mask ratio {ratio} masks {k} of {n_patches} patches; the mask is degenerate")
    return k


def sample_mask(rng, leads: int, n_patches: int, ratio: float = 0.75, batch: int | None = None) -> MaskPlan:
    """Draw an independent uniform subset of masked patches for every lead."""
    k = masked_count(n_patches, ratio)
    shape = (leads, n_patches) if batch is None else (batch, leads, n_patches)
    perm = np.argsort(rng.random(shape), axis=-1, kind="stable")
    masked = np.sort(perm[..., :k], axis=-1)
    visible = np.sort(perm[..., k:], axis=-1)
    return MaskPlan(visible, masked, n_patches)


@dataclass
class DecoderConfig:
    dim: int | None = None
    depth: int = 4
    heads: int | None = None
    mlp_ratio: int = 4
    norm: str = "post"  # "pre": pre-norm blocks plus a final LayerNorm

    def resolve(self, vit: VitConfig) -> "DecoderConfig":
        dim = self.dim if self.dim is not None else vit.embed_dim
        heads = self.heads if self.heads is not None else math.gcd(vit.heads, dim)
        if dim % heads:
            raise ConfigError(f"decoder dim {dim} is not divisible by decoder heads {heads}")
        if self.depth < 0:
            raise ConfigError("decoder depth must be non-negative")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"decoder norm must be pre or post, got {self.norm!r}")
        return DecoderConfig(dim, self.depth, heads, self.mlp_ratio, self.norm)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown decoder keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PretrainConfig:
    epochs: int = 800
    batch_size: int = 128
    lr: float = 6e-4
    warmup_epochs: int = 40
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    mask_ratio: float = 0.75
    mode: str = "stmem"
    schedule: str = "cosine"  # or "constant" after warmup
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be cosine or constant, got {self.schedule!r}")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown pretrain keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


def _gather_lead_slots(x, slots):
    """Pick ``slots`` (B, C, K) along axis 2 of a (B, C, T, F) tensor."""
    b, c, _ = slots.shape
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    return x[bi, ci, slots]


def _visible_slots(plan: MaskPlan):
    vis = plan.visible
    b, c, _ = vis.shape
    first = np.zeros((b, c, 1), dtype=int)
    last = np.full((b, c, 1), plan.n_patches + 1, dtype=int)
    return np.concatenate([first, vis + 1, last], axis=-1)


class LeadwiseDecoder(Module):
    """Shared decoder that reconstructs each lead from that lead's tokens only."""

    def __init__(self, vit: VitConfig, config: DecoderConfig, rng):
        super().__init__()
        config = config.resolve(vit)
        self.config = config
        n, d_model, dim = vit.num_patches, vit.embed_dim, config.dim
        self.proj = Linear(d_model, dim, rng)
        self.mask_token = Parameter(trunc_normal(rng, (dim,)))
        self.pos_embed = Parameter(sincos_table(n + 2, dim))
        pre = config.norm == "pre"
        self.blocks = [
            TransformerBlock(dim, config.heads, config.mlp_ratio * dim, rng, pre_norm=pre) for _ in range(config.depth)
        ]
        self.norm = LayerNorm(dim) if pre else None
        self.head = Linear(dim, vit.patch_length, rng)

    def __call__(self, encoded, plan: MaskPlan):
        """Reconstruct masked patches.

        Parameters
        ----------
        encoded : Tensor, shape (B, C * (S + 2), D)
            Encoder output over the visible layout of ``plan``.
        plan : MaskPlan (batched)

        Returns
        -------
        Tensor, shape (B, C, S', P)
        """
        plan = plan.as_batch()
        b, c, s = plan.visible.shape
        s_mask = plan.masked.shape[-1]
        n = plan.n_patches
        encoded = as_tensor(encoded)
        if encoded.shape[:2] != (b, c * (s + 2)):
            raise ConfigError(f"encoded sequence {encoded.shape} does not match plan ({b}, {c}x{s + 2})")
        dim = self.config.dim
        z0 = self.proj(encoded.reshape(b, c, s + 2, encoded.shape[-1]))
        masks = broadcast_to(self.mask_token.reshape(1, 1, 1, dim), (b, c, s_mask, dim))
        joined = concat([z0, masks], axis=2)

        # joined holds [SEP, visible..., SEP, masked...]; restore slot order.
        restore = np.empty((b, c, n + 2), dtype=int)
        restore[..., 0] = 0
        restore[..., n + 1] = s + 1
        np.put_along_axis(restore, plan.visible + 1, np.broadcast_to(np.arange(1, s + 1), plan.visible.shape), -1)
        np.put_along_axis(
            restore, plan.masked + 1, np.broadcast_to(np.arange(s + 2, s + 2 + s_mask), plan.masked.shape), -1
        )
        z = _gather_lead_slots(joined, restore) + self.pos_embed
        z, _ = run_blocks(self.blocks, z.reshape(b * c, n + 2, dim))
        if self.norm is not None:
            z = self.norm(z)
        z = z.reshape(b, c, n + 2, dim)
        return self.head(_gather_lead_slots(z, plan.masked + 1))


def reconstruction_loss(predicted, patches, plan: MaskPlan) -> Tensor:
    """Mean squared error over masked patches, averaged per sample within a patch.

    Equals ``(1/|M|) * sum_i ||X_hat_i - X_i||^2 / P`` over masked locations.
    """
    plan = plan.as_batch()
    if plan.masked.shape[-1] == 0:
        raise ConfigError("reconstruction loss needs at least one masked patch")
    patches = np.asarray(patches.data if isinstance(patches, Tensor) else patches)
    if patches.ndim == 3:
        patches = patches[None]
    target = _gather_lead_slots(patches, plan.masked)
    predicted = as_tensor(predicted)
    if predicted.shape != target.shape:
        raise ConfigError(f"prediction {predicted.shape} does not match masked target {target.shape}")
    diff = predicted - Tensor(target, dtype=predicted.dtype)
    return mean(diff * diff)


class MaskedAutoencoder(Module):
    """Encoder plus lead-wise decoder for masked reconstruction pretraining."""

    def __init__(self, vit: VitConfig, decoder: DecoderConfig | None = None, rng=None, mode="stmem"):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.mode = mode
        self.encoder = VitEncoder(vit, rng)
        self.decoder = LeadwiseDecoder(vit, decoder or DecoderConfig(), rng)

    @property
    def vit(self) -> VitConfig:
        return self.encoder.config

    def encode_visible(self, patches, plan: MaskPlan, capture=False, rng=None):
        """Encode SEP pairs plus visible patches; returns ``(Y_bar, activations)``.

        In ``ipastmem`` mode ``Y_bar`` is the mean over all layer outputs.
        """
        plan = plan.as_batch()
        emb = self.encoder.embed(patches)
        b, c, _, d = emb.shape
        tokens = _gather_lead_slots(emb, _visible_slots(plan))
        tokens = tokens.reshape(b, c * tokens.shape[2], d)
        pooled = self.mode == "ipastmem"
        out, acts = self.encoder.encode(tokens, capture=capture or pooled, rng=rng)
        if pooled and acts.depth:
            out = pool_layers(acts.hidden)
        return out, acts

    def __call__(self, patches, plan: MaskPlan, rng=None):
        encoded, _ = self.encode_visible(patches, plan, rng=rng)
        return self.decoder(encoded, plan)

    def loss(self, patches, plan: MaskPlan, rng=None) -> Tensor:
        return reconstruction_loss(self(patches, plan, rng), patches, plan)


def pool_layers(hidden):
    """Unweighted elementwise mean of per-layer outputs."""
    if len(hidden) == 1:
        return hidden[0]
    total = hidden[0]
    for h in hidden[1:]:
        total = total + h
    return total * (1.0 / len(hidden))


def encode_visible(model: MaskedAutoencoder, patches, plan, capture=False):
    return model.encode_visible(patches, plan, capture)


def ipastmem_encode(model: MaskedAutoencoder, patches, plan):
    """Layer-pooled visible encoding regardless of ``model.mode``."""
    plan = plan.as_batch()
    emb = model.encoder.embed(patches)
    b, c, _, d = emb.shape
    tokens = _gather_lead_slots(emb, _visible_slots(plan)).reshape(b, -1, d)
    _, acts = model.encoder.encode(tokens, capture=True)
    return pool_layers(acts.hidden)


def decode_and_reconstruct(model: MaskedAutoencoder, encoded, plan):
    return model.decoder(encoded, plan)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _decay_mask(params):
    return [p.ndim >= 2 for p in params]


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    history: list = field(default_factory=list)
    optimizer: AdamW | None = None
    checkpoint: Path | None = None

    @property
    def losses(self):
        return [row["loss"] for row in self.history]


def _batch_rng(seed, epoch, batch):
    return np.random.default_rng([seed, epoch, batch])


def _write_loss_log(path, history):
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOSS_LOG_HEADER)
            for row in history:
                writer.writerow([row["epoch"], row["step"], repr(row["loss"]), repr(row["lr"])])
    except OSError as exc:
        raise OSError(f"cannot write loss log {path}: {exc}") from exc


def save_pretrain_checkpoint(path, model, optimizer, config, decoder_cfg, history, epoch):
    state = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
    state.update({f"decoder.{k}": v for k, v in model.decoder.state_dict().items()})
    if optimizer is not None:
        names = [n for n, p in model.named_parameters() if p.trainable]
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            state[f"optim.m.{name}"] = m
            state[f"optim.v.{name}"] = v
    meta = {
        "vit": model.vit.to_dict(),
        "decoder": asdict(decoder_cfg),
        "pretrain": config.to_dict(),
        "mode": model.mode,
        "epoch": epoch,
        "optimizer_t": optimizer.t if optimizer is not None else 0,
        "history": history,
    }
    save_checkpoint(path, state, meta)


def load_pretrain_checkpoint(path):
    """Rebuild model, optimizer state arrays and metadata from a checkpoint."""
    state, meta = load_checkpoint(path)
    vit = VitConfig.from_dict(meta["vit"])
    dec = DecoderConfig.from_dict(meta["decoder"])
    from .numcore import precision

    dtype = state[next(iter(state))].dtype
    with precision(dtype):
        model = MaskedAutoencoder(vit, dec, np.random.default_rng(0), mode=meta.get("mode", "stmem"))
    model.encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
    model.decoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder.")})
    return model, state, meta


def pretrain_loop(
    config: PretrainConfig,
    signals,
    vit: VitConfig,
    decoder: DecoderConfig | None = None,
    out_dir=None,
    resume=None,
    progress=None,
) -> PretrainResult:
    """Masked-reconstruction pretraining.

    Parameters
    ----------
    config : PretrainConfig
    signals : array, shape (n_records, C, L)
        Preprocessed signals.
    vit, decoder : model configuration
    out_dir : path, optional
        Where ``loss.csv`` and ``checkpoint.ckpt`` (plus ``epoch_XXXX.ckpt``
        every ``config.checkpoint_every`` epochs) are written.
    resume : path, optional
        Checkpoint to continue from; the remaining epochs reproduce an
        uninterrupted run bit for bit.
    progress : callable, optional
        Called with each epoch's log row.

    Learning-rate warmup and cosine decay are counted in epochs but evaluated
    per optimizer step.
    """
    signals = np.asarray(signals)
    if signals.ndim != 3 or len(signals) == 0:
        raise InputError(f"expected a non-empty (records, leads, samples) array, got shape {signals.shape}")
    decoder = (decoder or DecoderConfig()).resolve(vit)
    patches = patchify(signals, vit.patch_length).astype(np.result_type(signals.dtype, np.float32), copy=False)
    masked_count(vit.num_patches, config.mask_ratio)

    start_epoch, history = 0, []
    if resume is not None:
        model, state, meta = load_pretrain_checkpoint(resume)
        if model.mode != config.mode:
            raise ConfigError(f"checkpoint mode {model.mode!r} differs from requested {config.mode!r}")
        start_epoch = int(meta["epoch"])
        history = list(meta.get("history", []))
    else:
        model = MaskedAutoencoder(vit, decoder, np.random.default_rng(config.seed), mode=config.mode)
    patches = patches.astype(model.encoder.sep.dtype, copy=False)
    model.train()
    params = model.trainable_parameters()
    opt = AdamW(params, config.betas, config.eps, config.weight_decay, decay_mask=_decay_mask(params))
    if resume is not None:
        names = [n for n, p in model.named_parameters() if p.trainable]
        opt.load_state([state[f"optim.m.{n}"] for n in names], [state[f"optim.v.{n}"] for n in names],
                       meta["optimizer_t"])

    n = len(patches)
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = LrSchedule(
        config.lr, config.warmup_epochs * steps_per_epoch, config.epochs * steps_per_epoch, kind=config.schedule
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = start_epoch * steps_per_epoch
    ckpt_path = None
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total, lr = 0.0, 0.0
        for bi in range(steps_per_epoch):
            idx = order[bi * config.batch_size : (bi + 1) * config.batch_size]
            brng = _batch_rng(config.seed, epoch, bi)
            plan = sample_mask(brng, vit.leads, vit.num_patches, config.mask_ratio, batch=len(idx))
            batch = patches[idx]
            loss = model.loss(batch, plan, rng=brng)
            check_finite(loss, f"pretraining loss (epoch {epoch + 1}, batch {bi})")
            opt.zero_grad()
            backward(loss)
            lr = lr_at(schedule, step + 1)
            opt.step(lr)
            step += 1
            total += loss.item() * len(idx)
        row = {"epoch": epoch + 1, "step": step, "loss": total / n, "lr": lr}
        if not np.isfinite(row["loss"]):
            raise NumericError(f"epoch {epoch + 1} loss is not finite")
        history.append(row)
        log.info("epoch %d loss %.6f lr %.3g (%.2fs)", epoch + 1, row["loss"], lr, time.perf_counter() - t0)
        if progress is not None:
            progress(row)
        if out_dir is not None:
            _write_loss_log(out_dir / "loss.csv", history)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_pretrain_checkpoint(
                    out_dir / f"epoch_{epoch + 1:04d}.ckpt", model, opt, config, decoder, history, epoch + 1
                )
    if out_dir is not None:
        ckpt_path = out_dir / "checkpoint.ckpt"
        save_pretrain_checkpoint(ckpt_path, model, opt, config, decoder, history, config.epochs)
        _write_loss_log(out_dir / "loss.csv", history)
    model.eval()
    return PretrainResult(model, history, opt, ckpt_path)
