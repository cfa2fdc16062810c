"""Minimal dense-tensor library with reverse-mode autodiff."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    broadcast_to,
    clamp,
    concat,
    cross_entropy_rows,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    layer_norm,
    log,
    masked_mean_pool,
    matmul,
    mul,
    put_rows,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax,
    sub,
    transpose,
)
from .tensor import OpNode, Tape, Tensor, active_tape, backward, parameter

__all__ = [
    "GradCheckReport",
    "OpNode",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "broadcast_to",
    "clamp",
    "concat",
    "cross_entropy_rows",
    "div",
    "dropout",
    "embedding",
    "exp",
    "gelu",
    "grad_check",
    "layer_norm",
    "log",
    "masked_mean_pool",
    "matmul",
    "mul",
    "parameter",
    "put_rows",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "softmax",
    "sub",
    "transpose",
]
