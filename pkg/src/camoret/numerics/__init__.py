"""Dense float64 tensor core with reverse-mode differentiation."""

from . import kernels
from .gradcheck import GradCheckResult, NonFiniteLossError, grad_check
from .rng import Stream, stream_id
from .rng import seeded_normal as _seeded_normal_data
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    add_bias,
    add_const,
    as_tensor,
    concat,
    exp,
    gelu,
    index,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    mul_const,
    no_grad,
    parameter,
    reshape,
    scale,
    sigmoid,
    softmax,
    softmax_rows,
    sub,
    sum_,
    take_rows,
    transpose,
)


def seeded_normal(shape, seed, std, stream=0, requires_grad=False, name=None):
    """Deterministic N(0, std^2) tensor for a given ``(shape, seed, stream)``."""
    return Tensor(_seeded_normal_data(shape, seed, std, stream), requires_grad=requires_grad,
                  name=name)


__all__ = [
    "GradCheckResult", "NonFiniteLossError", "ShapeError", "Stream", "Tape", "Tensor",
    "active_tape", "add", "add_bias", "add_const", "as_tensor", "concat", "exp", "gelu",
    "grad_check", "index", "kernels", "l2_normalize", "layer_norm", "linear", "log",
    "log_softmax", "matmul", "mean", "mul", "mul_const", "no_grad", "parameter", "reshape",
    "scale", "seeded_normal", "sigmoid", "softmax", "softmax_rows", "stream_id", "sub",
    "sum_", "take_rows", "transpose",
]
