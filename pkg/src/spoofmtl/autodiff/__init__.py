"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, numerical_grad, relative_error
from .lstm import bilstm, lstm
from .module import Module
from .ops import (
    DegenerateInputWarning,
    RunningStats,
    add,
    batch_norm2d,
    concat,
    conv2d,
    cosine,
    dropout,
    index,
    l2_normalize,
    linear,
    matmul,
    max_feature_map,
    maxpool2d,
    mean_over_axis,
    min_over_axis,
    mul,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    take_along_axis,
    tanh,
    transpose,
)
from .ops import sum as reduce_sum
from .optim import Adam, AdamState, adam_step
from .tensor import Parameter, Tape, Tensor, active_tape, backward, is_grad_enabled, no_grad, reset_tape

__all__ = [
    "Adam", "AdamState", "DegenerateInputWarning", "Module", "Parameter", "RunningStats", "Tape",
    "Tensor", "active_tape", "adam_step", "add", "backward", "batch_norm2d", "bilstm", "concat",
    "config_hash", "conv2d", "cosine", "dropout", "grad_check", "index", "is_grad_enabled",
    "l2_normalize", "linear", "load_checkpoint", "lstm", "matmul", "max_feature_map", "maxpool2d",
    "mean_over_axis", "min_over_axis", "mul", "no_grad", "numerical_grad", "reduce_sum",
    "relative_error", "relu", "reset_tape", "reshape", "save_checkpoint", "sigmoid", "square",
    "sub", "take_along_axis", "tanh", "transpose",
]
