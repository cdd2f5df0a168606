"""Differentiable network operations: convolution, batch normalization,
transposed-convolution upsampling, pooling, fully connected layers and
activations, plus thin layer classes that own the parameters.

All spatial ops take N,C,H,W float64 tensors.  Convolution kernels are laid
out (out_channels, in_channels/groups, kh, kw); grouped convolution routes
group g of the output channels to group g of the input channels only.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_op


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv2d_core(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int,
    padding: int,
    groups: int,
) -> Tensor:
    """Cross-correlation without the public kernel-size restriction.

    im2col laid out (N, C*kh*kw, Ho*Wo) so the batched matmul writes the
    output directly in N,C,H,W order; 1x1 kernels skip im2col entirely.
    """
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    g = groups
    og = cout // g
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} stride {stride} pad {padding} "
            f"does not fit input {h}x{w}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    pointwise = kh == 1 and kw == 1
    if pointwise:
        src = xp[:, :, ::stride, ::stride] if stride > 1 else xp
        cols = np.ascontiguousarray(src).reshape(n, c, ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(g, og, cg * kh * kw)
    if g == 1:
        out3 = np.matmul(w2[0], cols)
    else:
        colsg = cols.reshape(n, g, cg * kh * kw, ho * wo)
        out3 = np.empty((n, g, og, ho * wo))
        for gi in range(g):
            np.matmul(w2[gi], colsg[:, gi], out=out3[:, gi])
        out3 = out3.reshape(n, cout, ho * wo)
    if bias is not None:
        out3 += bias.data.reshape(1, cout, 1)
    out = out3.reshape(n, cout, ho, wo)

    xp_shape = xp.shape

    def bwd(gout):
        g3 = gout.reshape(n, cout, ho * wo)
        if g == 1:
            dw2 = np.tensordot(g3, cols, axes=([0, 2], [0, 2]))
            dcols = np.matmul(w2[0].T, g3)
        else:
            colsg2 = cols.reshape(n, g, cg * kh * kw, ho * wo)
            g3g = g3.reshape(n, g, og, ho * wo)
            dw2 = np.empty_like(w2)
            dcols = np.empty((n, g, cg * kh * kw, ho * wo))
            for gi in range(g):
                dw2[gi] = np.tensordot(
                    g3g[:, gi], colsg2[:, gi], axes=([0, 2], [0, 2])
                )
                np.matmul(w2[gi].T, g3g[:, gi], out=dcols[:, gi])
            dcols = dcols.reshape(n, c * kh * kw, ho * wo)
        dweight = dw2.reshape(weight.shape)
        # scatter columns back onto the padded input (col2im)
        if pointwise and stride == 1:
            dxp = dcols.reshape(n, c, ho, wo)
            if padding == 0:
                dx = dxp
            else:
                dx = dxp[:, :, padding : padding + h, padding : padding + w].copy()
        else:
            dxp = np.zeros(xp_shape)
            if pointwise:
                dxp[:, :, ::stride, ::stride] = dcols.reshape(n, c, ho, wo)
            else:
                dc6 = dcols.reshape(n, c, kh, kw, ho, wo)
                for u in range(kh):
                    for v in range(kw):
                        dxp[
                            :, :,
                            u : u + stride * ho : stride,
                            v : v + stride * wo : stride,
                        ] += dc6[:, :, u, v]
            if padding:
                dx = dxp[:, :, padding : padding + h, padding : padding + w].copy()
            else:
                dx = dxp
        if bias is not None:
            dbias = gout.sum(axis=(0, 2, 3))
            return dx, dweight, dbias
        return dx, dweight

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", inputs, out, bwd)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over an N,C,H,W tensor.

    Output spatial size is ``floor((size + 2*padding - k)/stride) + 1``.
    With ``groups=G``, output group g reads input group g only.  Kernels
    must be square with spatial size 1 or 3; the bilinear upsampling path
    has its own kernels and does not go through this entry point.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects rank-4 input and kernel, got {x.shape} / {weight.shape}"
        )
    cout, cg, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ConfigError(f"conv2d kernel spatial size must be 1 or 3, got {kh}x{kw}")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d padding must be non-negative, got {padding}")
    c = x.shape[1]
    if groups < 1 or c % groups != 0 or cout % groups != 0:
        raise ConfigError(
            f"groups={groups} must divide in-channels {c} and out-channels {cout}"
        )
    if cg != c // groups:
        raise DimensionError(
            f"kernel expects {cg * groups} input channels (groups={groups}), got {c}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    return _conv2d_core(x, weight, bias, stride, padding, groups)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class RunningStats:
    """Mutable per-channel running mean/variance buffers (not differentiated)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the N,H,W axes.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers by ``(1-momentum)*old + momentum*batch``; eval mode
    normalizes by the running buffers.  A single-element batch with zero
    variance is fine: eps keeps the denominator positive.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects N,C,H,W input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    if stats.mean.shape != (c,):
        raise DimensionError(f"running stats sized {stats.mean.shape} != ({c},)")
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        # in-place so buffer identity survives for checkpointing
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * mu
        stats.var *= 1.0 - momentum
        stats.var += momentum * var
    else:
        mu = stats.mean.copy()
        var = stats.var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    # single fused affine pass: out = x*scale + shift
    scale = gamma.data * inv_std
    shift = beta.data - mu * scale
    out = xd * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3))
        centered = xd - mu.reshape(1, c, 1, 1)
        g_centered = (g * centered).sum(axis=(0, 2, 3))
        dgamma = g_centered * inv_std
        if mode == "eval":
            dx = g * scale.reshape(1, c, 1, 1)
            return dx, dgamma, dbeta
        # train mode: differentiate through the batch statistics
        gam_ivs = (gamma.data * inv_std).reshape(1, c, 1, 1)
        dvar = (gamma.data * g_centered) * (-0.5) * inv_std**3
        dmu = -gam_ivs.reshape(c) * dbeta + dvar * (-2.0 / m) * centered.sum(
            axis=(0, 2, 3)
        )
        dx = (
            g * gam_ivs
            + centered * (dvar * (2.0 / m)).reshape(1, c, 1, 1)
            + (dmu / m).reshape(1, c, 1, 1)
        )
        return dx, dgamma, dbeta

    return make_op("batchnorm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# upsampling via transposed convolution with a bilinear kernel
# ---------------------------------------------------------------------------

def bilinear_kernel(factor: int) -> np.ndarray:
    """The standard 2-D bilinear interpolation kernel for a given factor.

    Size is ``2*factor - factor % 2``; each polyphase component sums to 1,
    so constant inputs stay constant away from the border.
    """
    k = 2 * factor - factor % 2
    if k % 2 == 1:
        center = factor - 1.0
    else:
        center = factor - 0.5
    og = np.ogrid[:k, :k]
    return (1.0 - np.abs(og[0] - center) / factor) * (
        1.0 - np.abs(og[1] - center) / factor
    )


def _tap_slices(offset: int, factor: int, in_size: int, out_size: int):
    """Aligned input/output slices for one transposed-conv kernel tap.

    Output position ``i*factor + offset`` must land in [0, out_size).
    """
    i0 = 0 if offset >= 0 else (-offset + factor - 1) // factor
    i1 = min(in_size - 1, (out_size - 1 - offset) // factor)
    if i0 > i1:
        return None
    return (
        slice(i0, i1 + 1),
        slice(i0 * factor + offset, i1 * factor + offset + 1, factor),
    )


def upsample(x: Tensor, kernel: Tensor, factor: int) -> Tensor:
    """Depthwise transposed convolution scaling H,W by ``factor``.

    ``kernel`` has shape (C, 1, k, k) with ``k = 2*factor - factor % 2``;
    pass a non-grad tensor for the frozen bilinear variant or a parameter
    tensor for the learned one.  Each kernel tap is applied as one strided
    scatter, so nothing larger than the output is ever materialized.
    """
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"upsample expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    k = 2 * factor - factor % 2
    if kernel.shape != (c, 1, k, k):
        raise DimensionError(
            f"upsample kernel shape {kernel.shape} != ({c}, 1, {k}, {k})"
        )
    pad = (k - factor + 1) // 2  # ceil((k - factor) / 2), so out = factor * in
    oh, ow = h * factor, w * factor
    xd = x.data
    kd = kernel.data

    taps = []
    for u in range(k):
        row = _tap_slices(u - pad, factor, h, oh)
        if row is None:
            continue
        for v in range(k):
            col = _tap_slices(v - pad, factor, w, ow)
            if col is not None:
                taps.append((u, v, row, col))

    out = np.zeros((n, c, oh, ow))
    for u, v, (ri, ro), (ci, co) in taps:
        out[:, :, ro, co] += xd[:, :, ri, ci] * kd[:, 0, u, v].reshape(1, c, 1, 1)

    def bwd(g):
        dx = np.zeros_like(xd)
        for u, v, (ri, ro), (ci, co) in taps:
            dx[:, :, ri, ci] += g[:, :, ro, co] * kd[:, 0, u, v].reshape(1, c, 1, 1)
        if not kernel.requires_grad:
            return dx, None
        dk = np.zeros_like(kd)
        for u, v, (ri, ro), (ci, co) in taps:
            dk[:, 0, u, v] = (g[:, :, ro, co] * xd[:, :, ri, ci]).sum(axis=(0, 2, 3))
        return dx, dk

    return make_op("upsample", (x, kernel), out, bwd)


# ---------------------------------------------------------------------------
# pooling / fully connected / activations
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H,W per channel; output shape (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return make_op("global_avg_pool", (x,), out, bwd)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map per row: (N,Cin) @ (Cout,Cin)^T + bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"fully_connected expects rank-2 input/weight, got {x.shape}/{weight.shape}"
        )
    cout, cin = weight.shape
    if x.shape[1] != cin:
        raise DimensionError(f"input features {x.shape[1]} != weight in-dim {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is not None:
            return dx, dw, g.sum(axis=0)
        return dx, dw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("fully_connected", inputs, out, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return make_op("relu", (x,), np.where(mask, x.data, 0.0), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return make_op("sigmoid", (x,), s, bwd)


def softmax_group(x: Tensor, group_size: int) -> Tensor:
    """Softmax within each consecutive channel group at every location."""
    if x.ndim != 4:
        raise DimensionError(f"softmax_group expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    if group_size < 1 or c % group_size != 0:
        raise ConfigError(
            f"channel count {c} not divisible by group size {group_size}"
        )
    xg = x.data.reshape(n, c // group_size, group_size, h, w)
    shifted = xg - xg.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=2, keepdims=True)

    def bwd(g):
        gg = g.reshape(n, c // group_size, group_size, h, w)
        dot = (gg * s).sum(axis=2, keepdims=True)
        return ((s * (gg - dot)).reshape(n, c, h, w),)

    return make_op("softmax_group", (x,), s.reshape(n, c, h, w), bwd)


def activation(x: Tensor, kind: str, group_size: Optional[int] = None) -> Tensor:
    """Dispatch on kind: 'relu', 'sigmoid' or 'softmax_group'."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_group":
        if group_size is None:
            raise ConfigError("softmax_group activation needs group_size")
        return softmax_group(x, group_size)
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# layers: parameter containers with uniform init
# ---------------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Zero-mean uniform init with the fan-in-scaled He bound sqrt(6/fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """Convolution layer owning its kernel (and optional bias)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Tensor(
            he_uniform(
                rng,
                (out_channels, in_channels // groups, kernel_size, kernel_size),
                fan_in,
            ),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out

    def named_buffers(self, prefix: str):
        return []


class BatchNorm2d:
    """Batch normalization layer: gamma/beta parameters plus running stats."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = RunningStats(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.stats, mode, self.momentum, self.eps
        )

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix: str):
        return [
            (f"{prefix}.running_mean", self.stats.mean),
            (f"{prefix}.running_var", self.stats.var),
        ]


class Linear:
    """Fully connected layer; bias off by default (always followed by BN here)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = False,
    ):
        self.weight = Tensor(
            he_uniform(rng, (out_features, in_features), in_features),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(out_features), requires_grad=True) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out

    def named_buffers(self, prefix: str):
        return []


class Upsample:
    """Transposed-convolution upsampler, frozen bilinear or learnable.

    The kernel starts as the exact bilinear interpolation kernel either way;
    with kind='learned_transposed' it becomes a trainable parameter.
    """

    def __init__(self, channels: int, factor: int, kind: str = "bilinear_fixed"):
        if kind not in ("bilinear_fixed", "learned_transposed"):
            raise ConfigError(f"unknown upsample kind {kind!r}")
        if factor < 1:
            raise ConfigError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor
        self.kind = kind
        k2d = bilinear_kernel(factor)
        kernel = np.broadcast_to(k2d, (channels, 1) + k2d.shape).copy()
        self.kernel = Tensor(kernel, requires_grad=(kind == "learned_transposed"))

    def forward(self, x: Tensor) -> Tensor:
        return upsample(x, self.kernel, self.factor)

    def named_parameters(self, prefix: str):
        if self.kind == "learned_transposed":
            return [(f"{prefix}.kernel", self.kernel)]
        return []

    def named_buffers(self, prefix: str):
        if self.kind == "learned_transposed":
            return []
        return [(f"{prefix}.kernel", self.kernel.data)]
