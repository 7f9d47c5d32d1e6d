"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import Parameter, Tensor, as_tensor, get_default_dtype

INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD, bound=2.0):
    """Normal samples redrawn until they fall inside ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(get_default_dtype())


class Module:
    """Minimal parameter registry.

    Parameters, sub-modules and lists of sub-modules assigned as attributes are
    discovered in assignment order, which makes parameter naming deterministic.
    Non-trainable state (running statistics) is listed in ``_buffers``.
    """

    _buffers: tuple = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for sub in value:
                    yield from sub.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.set_trainable(flag)
        return self

    def state_dict(self):
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = expected - set(state)
            unexpected = set(state) - expected
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                params[name].assign(value)
            elif name in buffers:
                owner, attr = self._resolve(name)
                current = getattr(owner, attr)
                value = np.asarray(value, dtype=np.asarray(current).dtype)
                if value.shape != np.shape(current):
                    raise ShapeError(f"buffer {name}: shape {value.shape} != {np.shape(current)}")
                setattr(owner, attr, value.copy())
        return self

    def _resolve(self, dotted):
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        return obj, parts[-1]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng, bias=True, std=INIT_STD):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), std))
        self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype())) if bias else None

    def __call__(self, x):
        y = as_tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=ops.LAYER_NORM_EPS):
        super().__init__()
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm1d(Module):
    """Batch normalisation over (batch, features) with running statistics.

    Running variance is tracked with the unbiased batch variance.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        x = as_tensor(x)
        if self.training:
            out, mu, var = ops.batch_norm_train(x, self.gamma, self.beta, self.eps)
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * unbiased
            return out
        scale = self.gamma * Tensor(1.0 / np.sqrt(self.running_var + self.eps))
        return (x - Tensor(self.running_mean)) * scale + self.beta


def batch_norm_1d(x, state: BatchNorm1d):
    """Functional alias: apply ``state`` in its current train/eval mode."""
    return state(x)
