"""Numeric kernel: tensors, autodiff, RNG, optimizer, gradient checks."""

from refedit.nk import ops
from refedit.nk.gradcheck import check_scalar_fn, finite_diff_check, relative_error
from refedit.nk.ops import (
    concat,
    embedding,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    matmul,
    relu,
    reshape,
    softmax,
    swapaxes,
    transpose,
)
from refedit.nk.optim import AdamW, OptimizerState, adamw_step
from refedit.nk.rng import Rng
from refedit.nk.tensor import ShapeError, Tensor, default_dtype, grad_enabled, no_grad, precision

__all__ = [
    "AdamW",
    "OptimizerState",
    "Rng",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "check_scalar_fn",
    "concat",
    "default_dtype",
    "embedding",
    "exp",
    "finite_diff_check",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "no_grad",
    "ops",
    "precision",
    "relative_error",
    "relu",
    "reshape",
    "softmax",
    "swapaxes",
    "transpose",
]
