"""Tensor, tape-based reverse-mode differentiation, NN primitives and Adam."""

from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .ops import (
    PRIMITIVES,
    RunningStats,
    add,
    batch_norm,
    bilinear_upsample2x,
    clip,
    concat,
    conv2d,
    div,
    dwconv3x3,
    exp,
    l2_normalize,
    layer_norm,
    log,
    logsumexp,
    matmul,
    max_pool2x2,
    mean,
    mul,
    neg,
    pointwise,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    silu,
    sub,
    transpose,
)
from .ops import sum as tsum
from .params import ParamStore, adam_step, uniform_fan_in
from .tensor import GradTape, Tensor, as_tensor, backward, no_tape

__all__ = [
    "PRIMITIVES",
    "GradCheckReport",
    "GradTape",
    "ParamStore",
    "RunningStats",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "bilinear_upsample2x",
    "clip",
    "concat",
    "conv2d",
    "div",
    "dwconv3x3",
    "exp",
    "finite_diff_check",
    "l2_normalize",
    "layer_norm",
    "log",
    "logsumexp",
    "matmul",
    "max_pool2x2",
    "mean",
    "mul",
    "neg",
    "no_tape",
    "pointwise",
    "relative_error",
    "relu",
    "reshape",
    "resize_bilinear",
    "sigmoid",
    "silu",
    "sub",
    "transpose",
    "tsum",
    "uniform_fan_in",
]
