"""Reverse-mode automatic differentiation with double-backward support."""

from .functional import (batch_norm, conv2d, conv_output_size, flatten, linear,
                         log_softmax, max_pool2d, one_hot, same_padding, softmax)
from .params import (CheckpointError, ParamSet, as_params, cast, detach, global_norm,
                     load_params, map_params, save_params, to_arrays)
from .tensor import (Tensor, add, amax, as_tensor, broadcast_to, default_dtype, exp,
                     get_default_dtype, grad, is_grad_enabled, log, matmul, mean, mul,
                     no_grad, power, relu, reshape, set_default_dtype, set_grad_enabled,
                     stop_gradient, sub, sum_to, transpose, tsum)

__all__ = [
    "CheckpointError", "ParamSet", "Tensor", "add", "amax", "as_params", "as_tensor",
    "batch_norm", "broadcast_to", "cast", "conv2d", "conv_output_size", "default_dtype",
    "detach", "exp", "flatten", "get_default_dtype", "global_norm", "grad",
    "is_grad_enabled", "linear", "load_params", "log", "log_softmax", "map_params",
    "matmul", "max_pool2d", "mean", "mul", "no_grad", "one_hot", "power", "relu",
    "reshape", "same_padding", "save_params", "set_default_dtype", "set_grad_enabled",
    "softmax", "stop_gradient", "sub", "sum_to", "to_arrays", "transpose", "tsum",
]
