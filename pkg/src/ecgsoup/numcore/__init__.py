"""Dense numpy tensors, reverse-mode autodiff, layers and optimizers."""

from .layers import INIT_STD, BatchNorm1d, LayerNorm, Linear, Module, batch_norm_1d, trunc_normal
from .ops import bce_with_logits, dropout, layer_norm, softmax, softmax_rows
from .optim import AdamW, LrSchedule, adamw_step, lr_at
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    check_finite,
    concat,
    div,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "INIT_STD",
    "AdamW",
    "BatchNorm1d",
    "LayerNorm",
    "Linear",
    "LrSchedule",
    "Module",
    "Parameter",
    "Tensor",
    "adamw_step",
    "add",
    "as_tensor",
    "backward",
    "batch_norm_1d",
    "bce_with_logits",
    "broadcast_to",
    "check_finite",
    "concat",
    "div",
    "dropout",
    "exp",
    "gelu",
    "get_default_dtype",
    "getitem",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "lr_at",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "softmax_rows",
    "sqrt",
    "stack",
    "sub",
    "swapaxes",
    "tanh",
    "transpose",
    "trunc_normal",
    "tsum",
]
