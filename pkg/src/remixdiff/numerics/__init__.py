"""Minimal dense-tensor autodiff, optimizer, checkpoint I/O and gradient checks."""

from .checkpoint import FORMAT_VERSION, load_arrays, save_arrays
from .gradcheck import check_gradients, finite_difference_grads, relative_error
from .optim import Adam, clip_global_norm
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    gelu,
    index,
    layernorm,
    linear,
    log,
    matmul,
    mix,
    mse,
    mul,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    set_finite_checks,
    silu,
    sinusoidal_embed,
    softmax,
    sub,
    transpose,
)

__all__ = [
    "FORMAT_VERSION",
    "NonFiniteError",
    "Tensor",
    "Adam",
    "add",
    "as_tensor",
    "check_gradients",
    "clip_global_norm",
    "concat",
    "exp",
    "finite_difference_grads",
    "gelu",
    "index",
    "layernorm",
    "linear",
    "load_arrays",
    "log",
    "matmul",
    "mix",
    "mse",
    "mul",
    "no_grad",
    "power",
    "reduce_mean",
    "reduce_sum",
    "relative_error",
    "reshape",
    "save_arrays",
    "set_finite_checks",
    "silu",
    "sinusoidal_embed",
    "softmax",
    "sub",
    "transpose",
]
