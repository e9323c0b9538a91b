"""Minimal reverse-mode differentiation over numpy arrays."""
from .gradcheck import GradcheckReport, gradcheck
from .ops import (
    PoolIndices,
    adaptive_avg_pool1d,
    adaptive_spans,
    concat,
    conv1d,
    conv_transpose1d,
    dropout,
    exp,
    grad_reverse,
    linear,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    maxpool1d,
    maxunpool1d,
    mse_per_sample,
    relu,
    reshape,
    sigmoid,
    softmax,
    take_rows,
)
from .tensor import Tensor, as_tensor, topological_order

__all__ = [
    "GradcheckReport", "PoolIndices", "Tensor", "adaptive_avg_pool1d", "adaptive_spans", "as_tensor",
    "concat", "conv1d", "conv_transpose1d", "dropout", "exp", "grad_reverse", "gradcheck", "linear",
    "log", "log_sigmoid", "log_softmax", "matmul", "maxpool1d", "maxunpool1d", "mse_per_sample", "relu",
    "reshape", "sigmoid", "softmax", "take_rows", "topological_order",
]
