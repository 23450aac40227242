"""Tensor engine: dense arrays, reverse-mode autodiff, network primitives."""
from .tensor import (
    NonFiniteError,
    Parameter,
    Tensor,
    add,
    backward,
    clamp_min,
    log,
    mul,
    tmean,
    tsum,
)
from .functional import (
    BatchNormState,
    activation,
    batchnorm,
    bilinear_kernel,
    channel_softmax,
    conv2d,
    gather_channel,
    maxpool2,
    relu,
    sigmoid,
    transposed_conv2d,
)
from .gradcheck import finite_diff_check

__all__ = [
    "BatchNormState",
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "activation",
    "add",
    "backward",
    "batchnorm",
    "bilinear_kernel",
    "channel_softmax",
    "clamp_min",
    "conv2d",
    "finite_diff_check",
    "gather_channel",
    "log",
    "maxpool2",
    "mul",
    "relu",
    "sigmoid",
    "tmean",
    "transposed_conv2d",
    "tsum",
]
