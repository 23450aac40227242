"""Network primitives: convolution, pooling, batchnorm, activations, softmax.

Convolutions are computed as a loop over kernel offsets with a batched
matmul per offset, which keeps everything in BLAS without an im2col
buffer. The same three kernels (forward, input-gradient, weight-gradient)
serve both conv2d and transposed_conv2d, since each is the adjoint of the
other.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _accumulate, make_node


# -- raw convolution kernels (no autodiff) --------------------------------
#
# Small kernels loop over the k*k offsets with one batched matmul each.
# When the kernel is a multiple of the stride (the x32 upsampling head:
# k = 2s), looping over s*s offsets would be Python-bound, so a tiled
# path reinterprets the padded raster as (tiles, s, tiles, s) and runs
# (k/s)^2 einsums instead.

def _tileable(stride: int, kh: int, kw: int, hp: int, wp: int) -> bool:
    return (stride > 2 and kh % stride == 0 and kw % stride == 0
            and hp % stride == 0 and wp % stride == 0)


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input {ci}, weight {ci_w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {h}x{wd}, kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2:]
    if _tileable(stride, kh, kw, hp, wp):
        s = stride
        tiles = xp.reshape(n, ci, hp // s, s, wp // s, s)
        out = np.zeros((n, co, ho, wo), dtype=x.dtype)
        for mi in range(kh // s):
            for mj in range(kw // s):
                xt = tiles[:, :, mi:mi + ho, :, mj:mj + wo, :]
                ws = w[:, :, mi * s:(mi + 1) * s, mj * s:(mj + 1) * s]
                out += np.einsum("nciajb,dcab->ndij", xt, ws, optimize=True)
        return out
    out = np.zeros((n, co, ho * wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            out += np.matmul(w[:, :, u, v], xs.reshape(n, ci, ho * wo))
    return out.reshape(n, co, ho, wo)


def _conv_dx(dout: np.ndarray, w: np.ndarray, stride: int, padding: int,
             in_hw: tuple[int, int]) -> np.ndarray:
    n, co, ho, wo = dout.shape
    _, ci, kh, kw = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = np.zeros((n, ci, hp, wp), dtype=dout.dtype)
    if _tileable(stride, kh, kw, hp, wp):
        s = stride
        tiles = dxp.reshape(n, ci, hp // s, s, wp // s, s)
        for mi in range(kh // s):
            for mj in range(kw // s):
                ws = w[:, :, mi * s:(mi + 1) * s, mj * s:(mj + 1) * s]
                tiles[:, :, mi:mi + ho, :, mj:mj + wo, :] += np.einsum(
                    "ncij,cdab->ndiajb", dout, ws, optimize=True)
    else:
        dflat = dout.reshape(n, co, ho * wo)
        for u in range(kh):
            for v in range(kw):
                contrib = np.matmul(w[:, :, u, v].T, dflat).reshape(n, ci, ho, wo)
                # fixed (u,v): distinct (i,j) hit distinct padded positions
                dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + wd]
    return dxp


def _conv_dw(dout: np.ndarray, x: np.ndarray, stride: int, padding: int,
             kernel_hw: tuple[int, int]) -> np.ndarray:
    n, co, ho, wo = dout.shape
    _, ci = x.shape[:2]
    kh, kw = kernel_hw
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2:]
    dw = np.empty((co, ci, kh, kw), dtype=dout.dtype)
    if _tileable(stride, kh, kw, hp, wp):
        s = stride
        tiles = xp.reshape(n, ci, hp // s, s, wp // s, s)
        for mi in range(kh // s):
            for mj in range(kw // s):
                xt = tiles[:, :, mi:mi + ho, :, mj:mj + wo, :]
                dw[:, :, mi * s:(mi + 1) * s, mj * s:(mj + 1) * s] = np.einsum(
                    "ndij,nciajb->dcab", dout, xt, optimize=True)
        return dw
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            dw[:, :, u, v] = np.tensordot(dout, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


# -- differentiable ops ----------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Ci,H,W) with (Co,Ci,kh,kw) plus bias."""
    data = _conv_fwd(x.data, weight.data, stride, padding)
    if bias is not None:
        data = data + bias.data[:, None, None]
    in_hw = x.data.shape[2:]
    k_hw = weight.data.shape[2:]

    def backw(out):
        if x.requires_grad:
            _accumulate(x, _conv_dx(out.grad, weight.data, stride, padding, in_hw))
        if weight.requires_grad:
            _accumulate(weight, _conv_dw(out.grad, x.data, stride, padding, k_hw))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(data, "conv2d", parents, backw)


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int,
                      padding: int | None = None) -> Tensor:
    """Fractional-strided convolution of (N,Ci,H,W) with (Ci,Co,k,k).

    Default padding (k - stride)/2 makes the output exactly stride times
    the input extents (the FCN upsampling configuration).
    """
    ci, co, kh, kw = weight.data.shape
    if x.data.shape[1] != ci:
        raise ValueError(f"transposed_conv2d channel mismatch: input {x.data.shape[1]}, weight {ci}")
    if padding is None:
        if (kh - stride) % 2 != 0:
            raise ValueError(f"kernel {kh} minus stride {stride} must be even to infer padding")
        padding = (kh - stride) // 2
    h, wd = x.data.shape[2:]
    out_hw = ((h - 1) * stride - 2 * padding + kh, (wd - 1) * stride - 2 * padding + kw)
    # forward of the transpose is the input-gradient kernel of conv2d
    data = _conv_dx(x.data, weight.data, stride, padding, out_hw)

    def backw(out):
        if x.requires_grad:
            _accumulate(x, _conv_fwd(out.grad, weight.data, stride, padding))
        if weight.requires_grad:
            _accumulate(weight, _conv_dw(x.data, out.grad, stride, padding, (kh, kw)))

    return make_node(data, "transposed_conv2d", (x, weight), backw)


def bilinear_kernel(channels: int, kernel_size: int, dtype=np.float32) -> np.ndarray:
    """Per-channel bilinear upsampling weights, shape (C, C, k, k)."""
    factor = (kernel_size + 1) // 2
    center = factor - 1 if kernel_size % 2 == 1 else factor - 0.5
    og = np.ogrid[:kernel_size, :kernel_size]
    filt = ((1 - abs(og[0] - center) / factor) * (1 - abs(og[1] - center) / factor))
    weight = np.zeros((channels, channels, kernel_size, kernel_size), dtype=dtype)
    for c in range(channels):
        weight[c, c] = filt
    return weight


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major window order."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    windows = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h // 2, w // 2, 4))
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backw(out):
        if x.requires_grad:
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, idx[..., None], out.grad[..., None], axis=-1)
            dx = (dwin.reshape(n, c, h // 2, w // 2, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(n, c, h, w))
            _accumulate(x, dx)

    return make_node(data, "maxpool2", (x,), backw)


class BatchNormState:
    """Running mean/variance of one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(len(self.running_mean), self.momentum, self.eps,
                             self.running_mean.dtype)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState,
              mode: str) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes with batch statistics and advances the running
    averages; infer mode uses the stored running statistics.
    """
    n, c, h, w = x.data.shape
    eps = state.eps
    g = scale.data[:, None, None]
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var).astype(state.running_var.dtype)

        def backw(out):
            dxhat = out.grad * g
            if x.requires_grad:
                axis = (0, 2, 3)
                mean_d = dxhat.mean(axis=axis)[:, None, None]
                mean_dx = (dxhat * xhat).mean(axis=axis)[:, None, None]
                dx = inv_std[:, None, None] * (dxhat - mean_d - xhat * mean_dx)
                _accumulate(x, dx)
            if scale.requires_grad:
                _accumulate(scale, (out.grad * xhat).sum(axis=(0, 2, 3)))
            if shift.requires_grad:
                _accumulate(shift, out.grad.sum(axis=(0, 2, 3)))

    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[:, None, None]) * inv_std[:, None, None]

        def backw(out):
            if x.requires_grad:
                _accumulate(x, out.grad * g * inv_std[:, None, None])
            if scale.requires_grad:
                _accumulate(scale, (out.grad * xhat).sum(axis=(0, 2, 3)))
            if shift.requires_grad:
                _accumulate(shift, out.grad.sum(axis=(0, 2, 3)))

    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")

    data = g * xhat + shift.data[:, None, None]
    return make_node(data, "batchnorm", (x, scale, shift), backw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backw(out):
        if x.requires_grad:
            _accumulate(x, out.grad * mask)

    return make_node(np.maximum(x.data, 0), "relu", (x,), backw)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backw(out):
        if x.requires_grad:
            _accumulate(x, out.grad * s * (1.0 - s))

    return make_node(s, "sigmoid", (x,), backw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def channel_softmax(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backw(out):
        if x.requires_grad:
            inner = (out.grad * p).sum(axis=1, keepdims=True)
            _accumulate(x, p * (out.grad - inner))

    return make_node(p, "channel_softmax", (x,), backw)


def gather_channel(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick x[n, index[n,i,j], i, j] for every pixel; index is constant."""
    idx = index[:, None, :, :]
    data = np.take_along_axis(x.data, idx, axis=1)[:, 0]

    def backw(out):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx, out.grad[:, None], axis=1)
            _accumulate(x, dx)

    return make_node(data, "gather_channel", (x,), backw)
