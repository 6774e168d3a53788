"""Minimal dense-tensor engine with reverse-mode autodiff."""
from . import ops
from .gradcheck import grad_check
from .ops import (
    ShapeError,
    add,
    channel_norm,
    concat,
    conv1d_depthwise,
    conv3d,
    cross_entropy,
    gelu,
    getitem,
    layer_norm,
    linear,
    masked_fill,
    masked_softmax,
    matmul,
    mean_pool,
    mul,
    multihead_attention,
    reduce_sum,
    relu,
    reshape,
    select_rows,
    stack,
    sub,
    transpose,
)
from .optim import SGD, MissingGradientError, sgd_step
from .tensor import Tensor, as_tensor, backward, no_grad

__all__ = [
    "SGD", "MissingGradientError", "ShapeError", "Tensor", "add", "as_tensor", "backward",
    "channel_norm", "concat", "conv1d_depthwise", "conv3d", "cross_entropy", "gelu", "getitem",
    "grad_check", "layer_norm", "linear", "masked_fill", "masked_softmax", "matmul", "mean_pool",
    "mul", "multihead_attention", "no_grad", "ops", "reduce_sum", "relu", "reshape",
    "select_rows", "sgd_step", "stack", "sub", "transpose",
]
