"""Minimal tensor engine: reverse-mode autodiff, CNN layers, SGD."""
from .kernels import BACKEND
from .ops import (
    BatchNormState,
    add,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    leaky_relu,
    linear,
    log_softmax,
    mean_all,
    mul,
    scale,
    soft_cross_entropy,
    softmax,
    softmax_cross_entropy,
    square,
    sum_all,
    take_columns,
    take_rows,
)
from .optim import ParamGroup, lr_schedule, sgd_step
from .tensor import Graph, Tensor, backward, no_grad

__all__ = [
    "BACKEND",
    "BatchNormState",
    "Graph",
    "ParamGroup",
    "Tensor",
    "add",
    "backward",
    "batchnorm2d",
    "conv2d",
    "global_avg_pool",
    "leaky_relu",
    "linear",
    "log_softmax",
    "lr_schedule",
    "mean_all",
    "mul",
    "no_grad",
    "scale",
    "sgd_step",
    "soft_cross_entropy",
    "softmax",
    "softmax_cross_entropy",
    "square",
    "sum_all",
    "take_columns",
    "take_rows",
]
