"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .conv import (avg_pool2d, conv2d, conv2d_fft, conv_transpose2d, fft_convolve_full,
                   fft_correlate, upsample2d)
from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import (DomainError, ShapeError, Tensor, add, as_tensor, broadcast_to, concat, div,
                     elu, exp, get_default_dtype, getitem, log, log_softmax, make_op, matmul,
                     mean, mul, neg, no_grad, pad2d, power, precision, relu, reshape, scale,
                     set_default_dtype, sigmoid, softmax, stack, sub, tabs, tanh, tmax, transpose,
                     tsum, xlogx)

__all__ = [
    "Adam", "AdamState", "DomainError", "ShapeError", "Tensor", "adam_step", "add", "as_tensor",
    "avg_pool2d", "broadcast_to", "check_gradients", "concat", "conv2d", "conv2d_fft",
    "conv_transpose2d", "div", "elu", "exp", "fft_convolve_full", "fft_correlate",
    "get_default_dtype", "getitem", "log", "log_softmax", "make_op", "matmul", "mean", "mul",
    "neg", "no_grad", "numerical_grad", "pad2d", "power", "precision", "relative_error", "relu",
    "reshape", "scale", "set_default_dtype", "sigmoid", "softmax", "stack", "sub", "tabs", "tanh",
    "tmax", "transpose", "tsum", "upsample2d", "xlogx",
]
