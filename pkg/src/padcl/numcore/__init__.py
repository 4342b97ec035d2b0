"""Tensors, reverse-mode tape, parameter store and checkpoint IO."""
from . import checkpoint
from .gradcheck import NondeterministicLoss, analytic_gradient, finite_diff_check
from .store import ParamView, ParameterStore
from .tensor import (
    NumericalError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat_rows,
    cross_entropy,
    custom_op,
    exp,
    forward_op,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    square,
    sub,
    take_rows,
    transpose,
)
from .tensor import sum as reduce_sum

__all__ = [
    "NondeterministicLoss", "NumericalError", "ParamView", "ParameterStore", "ShapeError",
    "Tape", "TapeError", "Tensor", "active_tape", "add", "analytic_gradient", "as_tensor",
    "backward", "broadcast_to", "checkpoint", "concat_rows", "cross_entropy", "custom_op", "exp",
    "finite_diff_check", "forward_op", "gelu", "getitem", "l2_normalize", "layer_norm",
    "matmul", "mean", "mul", "reduce_sum", "reshape", "scale", "softmax", "square", "sub",
    "take_rows", "transpose",
]
