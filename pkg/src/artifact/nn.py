"""Layers: strided 2-D convolution, 3-D transposed convolution, batchnorm, dense.

Convolution layers are single graph nodes with hand-written backward passes
(im2col / col2im on numpy arrays); everything else composes autodiff ops.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, as_tensor, default_dtype, make_result


class Module:
    """Container that discovers parameters, buffers and submodules by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def name_parameters(self, prefix: str = "") -> None:
        """Stamp each parameter with its dotted path."""
        for name, p in self.named_parameters(prefix):
            p.name = name


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), dtype=dtype)


def _zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), dtype=dtype)


# -- dense -------------------------------------------------------------------------

class Dense(Module):
    """Affine map ``x @ weight.T + bias`` with weight ``[out, in]``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or default_dtype()
        bound = math.sqrt(6.0 / (n_in + n_out))
        self.weight = _uniform(rng, bound, (n_out, n_in), dtype)
        self.bias = _zeros((n_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: Dense, x: Tensor) -> Tensor:
    x = as_tensor(x)
    n_out, n_in = layer.weight.shape
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"dense layer expects [B, {n_in}], got {x.shape}")
    return x @ layer.weight.T + layer.bias


# -- 2-D convolution ------------------------------------------------------------------

KERNEL = 3
STRIDE = 2  # the transposed convolution hard-codes the same stride


def same_padding(size: int, kernel: int = KERNEL, stride: int = STRIDE) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding giving ``ceil(size / stride)``."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class Conv2D(Module):
    """3x3, stride-2 convolution with "same" zero padding."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or default_dtype()
        fan_in = in_ch * KERNEL * KERNEL
        bound = math.sqrt(6.0 / fan_in)
        self.kernels = _uniform(rng, bound, (out_ch, in_ch, KERNEL, KERNEL), dtype)
        self.bias = _zeros((out_ch,), dtype)
        self.stride = STRIDE

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    out_ch, in_ch, kh, kw = kernels.shape
    B, C, H, W = x.shape
    if C != in_ch:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernels expect {in_ch}")
    Ho, ph0, ph1 = same_padding(H, kh)
    Wo, pw0, pw1 = same_padding(W, kw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    s = STRIDE
    # cols[b, c, i, j, ho, wo] = xp[b, c, s*ho + i, s*wo + j]
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    cols2 = cols.transpose(1, 2, 3, 0, 4, 5).reshape(C * kh * kw, B * Ho * Wo)
    w2 = kernels.data.reshape(out_ch, C * kh * kw)
    out = (w2 @ cols2).reshape(out_ch, B, Ho, Wo).transpose(1, 0, 2, 3)
    out = out + bias.data.reshape(1, out_ch, 1, 1)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(out_ch, B * Ho * Wo)
        gk = (g2 @ cols2.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo).transpose(3, 0, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, i, j]
            gx = gxp[:, :, ph0:ph0 + H, pw0:pw0 + W]
        return gx, gk, gb

    return make_result(np.ascontiguousarray(out), "conv2d", (x, kernels, bias), bw)


def conv2d_forward(layer: Conv2D, x: Tensor) -> Tensor:
    return conv2d(x, layer.kernels, layer.bias)


# -- 3-D transposed convolution --------------------------------------------------------

class Deconv3D(Module):
    """3x3x3 transposed convolution, stride 2 in each axis, doubling every spatial size."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or default_dtype()
        # each output voxel receives in_ch * 27 / 8 contributions on average
        fan_in = in_ch * KERNEL ** 3 / 8
        bound = math.sqrt(6.0 / fan_in)
        self.kernels = _uniform(rng, bound, (in_ch, out_ch, KERNEL, KERNEL, KERNEL), dtype)
        self.bias = _zeros((out_ch,), dtype)
        self.stride = (STRIDE,) * 3

    def forward(self, x: Tensor) -> Tensor:
        return deconv3d_forward(self, x)


def deconv3d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Transposed convolution: input voxel (d, h, w) scatters its kernel-weighted
    value onto output voxels (2d + a - 1, 2h + b - 1, 2w + c - 1); the output is
    cropped to exactly twice the input size.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 5:
        raise ShapeError(f"deconv3d expects [B, C, D, H, W], got {x.shape}")
    in_ch, out_ch, k, _, _ = kernels.shape
    B, C, D, H, W = x.shape
    if C != in_ch:
        raise ShapeError(f"deconv3d channel mismatch: input has {C}, kernels expect {in_ch}")
    P = D * H * W
    taps = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    x2 = x.data.transpose(1, 0, 2, 3, 4).reshape(C, B * P)
    # rows ordered (tap, out_ch) so each tap's block is contiguous
    w2 = kernels.data.reshape(C, out_ch, k ** 3).transpose(2, 1, 0).reshape(k ** 3 * out_ch, C)
    cols = (w2 @ x2).reshape(k ** 3, out_ch, B, D, H, W)
    # full-resolution index 2i + a is stored at [a % 2, ..., i + a // 2] (parity-major)
    full = np.zeros((2, 2, 2, out_ch, B, D + 1, H + 1, W + 1), dtype=x.dtype)
    for t, (a, b, c) in enumerate(taps):
        full[a % 2, b % 2, c % 2, :, :, a // 2:a // 2 + D, b // 2:b // 2 + H, c // 2:c // 2 + W] += cols[t]
    inter = full.transpose(4, 3, 5, 0, 6, 1, 7, 2).reshape(B, out_ch, 2 * D + 2, 2 * H + 2, 2 * W + 2)
    out = inter[:, :, 1:1 + 2 * D, 1:1 + 2 * H, 1:1 + 2 * W] + bias.data.reshape(1, out_ch, 1, 1, 1)

    def bw(g):
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        gpad = np.zeros((B, out_ch, 2 * D + 2, 2 * H + 2, 2 * W + 2), dtype=g.dtype)
        gpad[:, :, 1:1 + 2 * D, 1:1 + 2 * H, 1:1 + 2 * W] = g
        gfull = gpad.reshape(B, out_ch, D + 1, 2, H + 1, 2, W + 1, 2).transpose(3, 5, 7, 1, 0, 2, 4, 6)
        gcols = np.empty_like(cols)
        for t, (a, b, c) in enumerate(taps):
            gcols[t] = gfull[a % 2, b % 2, c % 2, :, :, a // 2:a // 2 + D, b // 2:b // 2 + H, c // 2:c // 2 + W]
        gcols2 = gcols.reshape(k ** 3 * out_ch, B * P)
        gk = None
        if kernels.requires_grad:
            gk = (gcols2 @ x2.T).reshape(k ** 3, out_ch, C).transpose(2, 1, 0).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gx = (w2.T @ gcols2).reshape(C, B, D, H, W).transpose(1, 0, 2, 3, 4)
        return gx, gk, gb

    return make_result(np.ascontiguousarray(out), "deconv3d", (x, kernels, bias), bw)


def deconv3d_forward(layer: Deconv3D, x: Tensor) -> Tensor:
    return deconv3d(x, layer.kernels, layer.bias)


def center_crop(x: Tensor, size: int) -> Tensor:
    """Crop the trailing three spatial axes of ``x`` to ``size`` about their center."""
    D = x.shape[-1]
    if size > D:
        raise ShapeError(f"cannot crop spatial size {D} to {size}")
    lo = (D - size) // 2
    sl = slice(lo, lo + size)
    return x[..., sl, sl, sl]


# -- batch normalization ------------------------------------------------------------------

class BatchNorm(Module):
    """Per-channel batch normalization over every axis except axis 1.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=None):
        dtype = dtype or default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype), dtype=dtype)
        self.beta = _zeros((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(self, x)


def batchnorm_forward(layer: BatchNorm, x: Tensor) -> Tensor:
    x = as_tensor(x)
    C = layer.gamma.shape[0]
    if x.ndim < 2 or x.shape[1] != C:
        raise ShapeError(f"batchnorm over {C} channels got input of shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    dtype = x.dtype
    if layer.training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        n = x.size // C
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = layer.momentum
        layer.running_mean[...] = m * layer.running_mean + (1 - m) * mean
        layer.running_var[...] = m * layer.running_var + (1 - m) * var * (n / max(n - 1, 1))
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(dtype)
    xhat = (x.data - mean.reshape(bshape).astype(dtype)) * inv_std.reshape(bshape)
    gamma, beta = layer.gamma, layer.beta
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = layer.training

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = inv_std.reshape(bshape) * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_result(out.astype(dtype, copy=False), "batchnorm", (x, gamma, beta), bw)
