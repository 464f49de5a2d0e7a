"""Minimal dense tensor engine with reverse-mode automatic differentiation."""

from .gradcheck import BlockResult, GradcheckReport, finite_difference_grad, gradcheck
from .optim import AdamW
from .rng import RngState
from .tensor import (
    DEFAULT_DTYPE,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    attention,
    avgpool2x,
    backward,
    clamp,
    concat,
    conv2d,
    div,
    erf,
    exp,
    getitem,
    grad_enabled,
    group_norm,
    log,
    matmul,
    mean_,
    mean_square_error,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    set_finite_checks,
    sigmoid,
    silu,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
    upsample_nearest2x,
)

__all__ = [
    "AdamW",
    "BlockResult",
    "DEFAULT_DTYPE",
    "GradcheckReport",
    "NonFiniteError",
    "RngState",
    "ShapeError",
    "Tensor",
    "add",
    "attention",
    "avgpool2x",
    "backward",
    "clamp",
    "concat",
    "conv2d",
    "div",
    "erf",
    "exp",
    "finite_difference_grad",
    "getitem",
    "grad_enabled",
    "gradcheck",
    "group_norm",
    "log",
    "matmul",
    "mean_",
    "mean_square_error",
    "mul",
    "neg",
    "no_grad",
    "power",
    "reshape",
    "set_finite_checks",
    "sigmoid",
    "silu",
    "softmax",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "tanh",
    "transpose",
    "upsample_nearest2x",
]
