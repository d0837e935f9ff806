"""Differentiable volumetric primitives on ``[B, C, D, H, W]`` tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _kernels
from .errors import ContractError
from .tensor import Tensor, make_node

Triple = tuple[int, int, int]


def _triple(v, name: str) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ContractError(f"{name} needs 3 entries, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (possibly grouped / transposed) 3-D convolution.

    Weight layout is ``[out, in // groups, kd, kh, kw]`` for regular and
    ``[in, out // groups, kd, kh, kw]`` for transposed convolutions.
    """

    in_channels: int
    out_channels: int
    kernel: Triple = (3, 3, 3)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    groups: int = 1
    transposed: bool = False
    output_padding: Triple = (0, 0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, name, _triple(getattr(self, name), name))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ContractError("channel counts and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ContractError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must be divisible by groups={self.groups}"
            )
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ContractError("kernel and stride must be positive")
        if any(p < 0 for p in self.padding) or any(p < 0 for p in self.output_padding):
            raise ContractError("padding must be nonnegative")
        if not self.transposed and any(self.output_padding):
            raise ContractError("output_padding only applies to transposed convolutions")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.transposed:
            return (self.in_channels, self.out_channels // self.groups, *self.kernel)
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_extent(self, extent: Triple) -> Triple:
        k, s, p = self.kernel, self.stride, self.padding
        if self.transposed:
            out = tuple(
                (n - 1) * s[i] - 2 * p[i] + k[i] + self.output_padding[i]
                for i, n in enumerate(extent)
            )
        else:
            out = tuple((n + 2 * p[i] - k[i]) // s[i] + 1 for i, n in enumerate(extent))
        if any(n < 1 for n in out):
            raise ContractError(f"non-positive output extent {out} for input extent {extent}")
        return out


def _is_pointwise(kernel, padding, groups) -> bool:
    return kernel == (1, 1, 1) and padding == (0, 0, 0) and groups == 1


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    d, h, w = padding
    out = np.zeros(x.shape[:2] + tuple(n + 2 * p for n, p in zip(x.shape[2:], padding)), dtype=x.dtype)
    out[:, :, d : d + x.shape[2], h : h + x.shape[3], w : w + x.shape[4]] = x
    return out


def _conv_forward(x, w, stride, padding, groups):
    nb, ci = x.shape[:2]
    co = w.shape[0]
    kernel = w.shape[2:]
    out_ext = tuple((x.shape[2 + i] + 2 * padding[i] - kernel[i]) // stride[i] + 1 for i in range(3))
    if _is_pointwise(kernel, padding, groups):
        xs = x[:, :, :: stride[0], :: stride[1], :: stride[2]]
        y = np.matmul(w.reshape(co, ci), xs.reshape(nb, ci, -1))
        return y.reshape(nb, co, *out_ext)
    return _kernels.conv_forward(
        np.ascontiguousarray(_pad(x, padding)), np.ascontiguousarray(w), *stride, groups, *out_ext
    )


def _conv_backward_input(gy, w, in_shape, stride, padding, groups):
    nb, co = gy.shape[:2]
    ci = in_shape[1]
    kernel = w.shape[2:]
    if _is_pointwise(kernel, padding, groups):
        gx = np.zeros(in_shape, dtype=gy.dtype)
        vals = np.matmul(w.reshape(co, ci).T, gy.reshape(nb, co, -1))
        gx[:, :, :: stride[0], :: stride[1], :: stride[2]] = vals.reshape(nb, ci, *gy.shape[2:])
        return gx
    padded = tuple(in_shape[2 + i] + 2 * padding[i] for i in range(3))
    gxp = _kernels.conv_backward_input(
        np.ascontiguousarray(gy), np.ascontiguousarray(w), *stride, groups, *padded
    )
    d, h, wd = padding
    return gxp[:, :, d : d + in_shape[2], h : h + in_shape[3], wd : wd + in_shape[4]]


def _conv_backward_weight(x, gy, w_shape, stride, padding, groups):
    nb, co = gy.shape[:2]
    ci = x.shape[1]
    kernel = w_shape[2:]
    if _is_pointwise(kernel, padding, groups):
        xs = x[:, :, :: stride[0], :: stride[1], :: stride[2]].reshape(nb, ci, -1)
        gw = np.zeros((co, ci), dtype=gy.dtype)
        for b in range(nb):
            gw += gy[b].reshape(co, -1) @ xs[b].T
        return gw.reshape(w_shape)
    return _kernels.conv_backward_weight(
        np.ascontiguousarray(_pad(x, padding)), np.ascontiguousarray(gy), *stride, groups, *kernel
    )


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation (or its transpose) of ``x`` with ``weight``.

    Output extents follow ``floor((n + 2p - k) / s) + 1``; for transposed
    convolutions ``(n - 1) s - 2p + k + output_padding``.
    """
    if x.ndim != 5:
        raise ContractError(f"conv3d expects [B, C, D, H, W], got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ContractError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ContractError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ContractError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    out_ext = spec.output_extent(x.shape[2:])
    stride, padding, groups = spec.stride, spec.padding, spec.groups
    xd, wd = x.data, weight.data

    if spec.transposed:
        out_shape = (x.shape[0], spec.out_channels, *out_ext)
        y = _conv_backward_input(xd, wd, out_shape, stride, padding, groups)
    else:
        y = _conv_forward(xd, wd, stride, padding, groups)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if spec.transposed:
            if x.requires_grad:
                gx = _conv_forward(g, wd, stride, padding, groups)
            if weight.requires_grad:
                gw = _conv_backward_weight(g, xd, wd.shape, stride, padding, groups)
        else:
            if x.requires_grad:
                gx = _conv_backward_input(g, wd, xd.shape, stride, padding, groups)
            if weight.requires_grad:
                gw = _conv_backward_weight(xd, g, wd.shape, stride, padding, groups)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(y, parents, backward)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


def instance_norm(x: Tensor, p: NormParams) -> Tensor:
    """Per-(sample, channel) standardization over space, then ``gamma * x_hat + beta``."""
    if x.ndim != 5:
        raise ContractError(f"instance_norm expects [B, C, D, H, W], got {x.shape}")
    c = x.shape[1]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ContractError(f"norm parameters must have length {c}")
    shape = x.shape
    flat = np.ascontiguousarray(x.data.reshape(shape[0], c, -1))
    y, xhat, inv_std = _kernels.instance_norm_forward(
        flat, p.gamma.data.astype(np.float64), p.beta.data.astype(np.float64), p.eps
    )

    def backward(gy):
        gx, ggamma, gbeta = _kernels.instance_norm_backward(
            np.ascontiguousarray(gy.reshape(flat.shape)), xhat, p.gamma.data.astype(np.float64), inv_std
        )
        dt = flat.dtype
        return gx.reshape(shape), ggamma.astype(dt), gbeta.astype(dt)

    return make_node(y.reshape(shape), (x, p.gamma, p.beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via ``erf``."""
    flat = x.data.reshape(-1)
    kernel = _kernels.gelu_with_slope_f32 if flat.dtype == np.float32 else _kernels.gelu_with_slope
    y, slope = kernel(flat)
    return make_node(y.reshape(x.shape), (x,), lambda g: (g * slope.reshape(x.shape),))


@dataclass
class GrnParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6
    divisor_mode: Literal["sum", "mean"] = "sum"

    def __post_init__(self):
        if self.eps <= 0:
            raise ContractError("GRN eps must be positive")
        if self.divisor_mode not in ("sum", "mean"):
            raise ContractError(f"unknown GRN divisor mode {self.divisor_mode!r}")


def grn_ratios(x: np.ndarray, eps: float = 1e-6, divisor_mode: str = "sum") -> np.ndarray:
    """Per-(sample, channel) ratio of a channel's L2 norm to the aggregate channel norm."""
    norms = np.sqrt(np.sum(x * x, axis=(2, 3, 4), keepdims=True))
    agg = norms.sum(axis=1, keepdims=True)
    if divisor_mode == "mean":
        agg = agg / x.shape[1]
    return norms / (agg + eps)


def grn3d(x: Tensor, p: GrnParams) -> Tensor:
    """Global response normalization with an identity residual.

    ``out = gamma * x * N + beta + x`` where ``N_i = ||x_i|| / (sum_j ||x_j|| + eps)``
    (``divisor_mode="mean"`` divides the aggregate by the channel count).
    """
    if x.ndim != 5:
        raise ContractError(f"grn3d expects [B, C, D, H, W], got {x.shape}")
    nc = x.shape[1]
    if p.gamma.shape != (nc,) or p.beta.shape != (nc,):
        raise ContractError(f"GRN parameters must have length {nc}")
    shape = x.shape
    scale = 1.0 if p.divisor_mode == "sum" else 1.0 / nc
    flat = np.ascontiguousarray(x.data.reshape(shape[0], nc, -1))
    gamma = p.gamma.data.astype(np.float64)
    y, norms, denom = _kernels.grn_forward(flat, gamma, p.beta.data.astype(np.float64), scale, p.eps)

    def backward(gy):
        gx, ggamma, gbeta = _kernels.grn_backward(
            np.ascontiguousarray(gy.reshape(flat.shape)), flat, gamma, norms, denom, scale
        )
        dt = flat.dtype
        return gx.reshape(shape), ggamma.astype(dt), gbeta.astype(dt)

    return make_node(y.reshape(shape), (x, p.gamma, p.beta), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 (max-subtracted)."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return make_node(y, (x,), backward)


def log_softmax_channels(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    return make_node(y, (x,), backward)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour subsampling keeping the corner voxel of each ``factor`` cube.

    Works on ``[B, D, H, W]`` or ``[D, H, W]`` integer volumes.
    """
    labels = np.asarray(labels)
    if factor < 1:
        raise ContractError(f"factor must be positive, got {factor}")
    spatial = labels.shape[-3:]
    if any(n % factor for n in spatial):
        raise ContractError(f"spatial extents {spatial} are not divisible by {factor}")
    if factor == 1:
        return labels.copy()
    return np.ascontiguousarray(labels[..., ::factor, ::factor, ::factor])
