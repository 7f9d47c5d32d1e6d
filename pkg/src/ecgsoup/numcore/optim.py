"""AdamW with decoupled weight decay and warmup/cosine learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass
class LrSchedule:
    """Learning rate as a function of the step index.

    ``kind="cosine"`` warms up linearly over ``warmup_steps`` then decays to
    zero at ``total_steps`` along a half cosine. ``kind="constant"`` holds
    ``base_lr`` after the (optional) warmup.
    """

    base_lr: float
    warmup_steps: int = 0
    total_steps: int = 1
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr < 0 or self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError(f"invalid schedule {self}")
        if self.kind == "cosine" and self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")


def lr_at(schedule: LrSchedule, t) -> float:
    t = min(max(t, 0), schedule.total_steps)
    if schedule.warmup_steps and t < schedule.warmup_steps:
        return schedule.base_lr * t / schedule.warmup_steps
    if schedule.kind == "constant":
        return schedule.base_lr
    span = schedule.total_steps - schedule.warmup_steps
    if span <= 0:
        return schedule.base_lr
    progress = (t - schedule.warmup_steps) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW over a list of :class:`Parameter`.

    Parameters
    ----------
    params : list of Parameter
    betas, eps, weight_decay :
        Usual Adam hyperparameters; decay is applied to the weights directly,
        not folded into the gradient.
    decay_mask : list of bool, optional
        Per-parameter switch for weight decay. Defaults to decaying all.
    lr_scale : list of float, optional
        Per-parameter multiplier on the step learning rate.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay_mask=None, lr_scale=None):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(self.params)
        self.lr_scale = list(lr_scale) if lr_scale is not None else [1.0] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            step_lr = lr * self.lr_scale[i]
            data = p.data
            if self.weight_decay and self.decay_mask[i]:
                data = data * (1.0 - step_lr * self.weight_decay)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = (data - step_lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self):
        return self.m, self.v

    def load_state(self, m, v, t):
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(m, self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(v, self.params)]
        self.t = int(t)


def adamw_step(optimizer: AdamW, lr_t: float) -> None:
    optimizer.step(lr_t)
