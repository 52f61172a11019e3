"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .layers import (conv2d, conv_transpose2d, cumulative_layer_norm, dilated_conv1d,
                     glu_gate, glu_split, instance_norm, linear)
from .optim import Adam, AdamState, adam_step, clip_grad_norm, global_grad_norm
from .tensor import (DEFAULT_DTYPE, Tensor, add, as_tensor, concat, cumsum, div, exp, log,
                     matmul, mean, mul, no_grad, power, prelu, relu, reshape, sigmoid, sqrt,
                     square, sub, transpose, tsum)

__all__ = ["Adam", "AdamState", "DEFAULT_DTYPE", "Tensor", "adam_step", "add",
           "as_tensor", "clip_grad_norm", "concat", "conv2d", "conv_transpose2d",
           "cumsum", "cumulative_layer_norm", "dilated_conv1d", "div", "exp",
           "global_grad_norm", "glu_gate", "glu_split", "instance_norm", "linear",
           "load_checkpoint", "log", "matmul", "mean", "mul", "no_grad", "power",
           "prelu", "read_header", "relu", "reshape", "save_checkpoint", "sigmoid",
           "sqrt", "square", "sub", "transpose", "tsum"]
