"""Dense tensors with a reverse-mode differentiation tape."""

from .core import Tape, Tensor, as_tensor, checked, current_tape, default_dtype, precision
from .conv import conv3d, conv_transpose3d, upsample_nearest
from .gradcheck import grad_check, grad_check_many
from .ops import (
    add,
    concat,
    div,
    dropout,
    exp,
    getitem,
    global_avg_pool,
    instance_norm,
    l2_normalize,
    leaky_relu,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    sum,
    transpose,
    where,
)

__all__ = [
    "Tape", "Tensor", "as_tensor", "checked", "current_tape", "default_dtype", "precision",
    "conv3d", "conv_transpose3d", "upsample_nearest", "grad_check", "grad_check_many",
    "add", "concat", "div", "dropout", "exp", "getitem", "global_avg_pool", "instance_norm", "l2_normalize", "leaky_relu",
    "linear", "log", "log_softmax", "matmul", "mean", "mul", "neg", "relu", "reshape",
    "sigmoid", "softmax", "sqrt", "square", "stack", "sub", "sum", "transpose", "where",
]
