"""Minimal reverse-mode differentiation over dense float64 arrays."""

from .conv import conv2d, conv2d_transposed, conv_output_size
from .core import (
    Tensor,
    add,
    affine,
    as_tensor,
    clamp,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mse,
    mul,
    power,
    record_branches,
    relu,
    reshape,
    scale,
    sigmoid,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)
from .gradcheck import GradCheckReport, grad_check, grad_check_report, relative_error
from .layers import BN_EPS, BN_MOMENTUM, LSTMParams, batch_norm, lstm_sequence, lstm_step

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "GradCheckReport",
    "LSTMParams",
    "Tensor",
    "add",
    "affine",
    "as_tensor",
    "batch_norm",
    "clamp",
    "concat",
    "conv2d",
    "conv2d_transposed",
    "conv_output_size",
    "div",
    "exp",
    "getitem",
    "grad_check",
    "grad_check_report",
    "log",
    "lstm_sequence",
    "lstm_step",
    "matmul",
    "mean",
    "mse",
    "mul",
    "power",
    "record_branches",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "sqrt",
    "square",
    "stack",
    "sub",
    "sum_",
    "take",
    "tanh",
    "transpose",
]
