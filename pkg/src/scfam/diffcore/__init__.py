"""Small reverse-mode autodiff over float64 numpy arrays."""
from .gradcheck import GradCheckReport, grad_check
from .nn import SGD, Adam, Conv2d, Linear, Module
from .ops import (
    absolute,
    adaptive_max_pool,
    adaptive_mean_pool,
    channel_max,
    clip,
    concat_channels,
    conv2d,
    exp,
    global_mean_pool,
    gradient_reversal,
    linear,
    log,
    max_pool2d,
    relu,
    sigmoid,
    smooth_l1,
    split_channels,
    stop_gradient,
)
from .tensor import NonFiniteError, Tensor, as_tensor, check_finite, no_grad, parameter, set_check_finite

__all__ = [
    "Adam",
    "Conv2d",
    "GradCheckReport",
    "Linear",
    "Module",
    "NonFiniteError",
    "SGD",
    "Tensor",
    "absolute",
    "adaptive_max_pool",
    "adaptive_mean_pool",
    "as_tensor",
    "channel_max",
    "check_finite",
    "clip",
    "concat_channels",
    "conv2d",
    "exp",
    "global_mean_pool",
    "grad_check",
    "gradient_reversal",
    "linear",
    "log",
    "max_pool2d",
    "no_grad",
    "parameter",
    "relu",
    "set_check_finite",
    "sigmoid",
    "smooth_l1",
    "split_channels",
    "stop_gradient",
]
