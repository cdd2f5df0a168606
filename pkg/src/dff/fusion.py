"""Multi-level response fusion.

The pieces here implement the fusion pipeline end to end: side feature
normalization blocks bring per-stage responses to full resolution and a
common magnitude; shared concatenation replicates the three single-channel
low-level maps once per category next to that category's high-level channel;
and the concatenated map is reduced back to K channels either with one fixed
weight per channel (a K-grouped 1x1 convolution) or with weights predicted
from the input itself, one vector per image (location-invariant) or one per
pixel (location-adaptive).

Channel layout of the concatenated map, for category i in [0, K):
``[high_i, low1, low2, low3]`` occupying channels ``4i .. 4i+3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Upsample,
    conv2d,
    global_avg_pool,
    relu,
    softmax_group,
)
from .tensor import Tensor, make_op, mul, reshape


@dataclass
class SideOutputs:
    """The four normalized side response maps, all at full resolution.

    a_side1..3 carry one channel each; a_side5 carries one channel per
    category.
    """

    a_side1: Tensor
    a_side2: Tensor
    a_side3: Tensor
    a_side5: Tensor

    def __post_init__(self):
        low = (self.a_side1, self.a_side2, self.a_side3)
        for t in low:
            if t.ndim != 4 or t.shape[1] != 1:
                raise DimensionError(
                    f"low-level side maps must be N,1,H,W, got {t.shape}"
                )
        if self.a_side5.ndim != 4:
            raise DimensionError(f"a_side5 must be N,K,H,W, got {self.a_side5.shape}")
        n, _, h, w = self.a_side5.shape
        for t in low:
            if t.shape[0] != n or t.shape[2:] != (h, w):
                raise DimensionError(
                    f"side maps disagree on N,H,W: {t.shape} vs {self.a_side5.shape}"
                )

    @property
    def num_classes(self) -> int:
        return self.a_side5.shape[1]


@dataclass
class ConcatMap:
    """Shared-concatenation output: N x 4K x H x W."""

    a_cat: Tensor
    num_classes: int

    def __post_init__(self):
        if self.a_cat.ndim != 4 or self.a_cat.shape[1] != 4 * self.num_classes:
            raise DimensionError(
                f"concat map must have {4 * self.num_classes} channels, "
                f"got shape {self.a_cat.shape}"
            )


class FixedFusionParams:
    """K groups of 4 fusion weights (plus optional per-category bias).

    Stored as the kernel of the equivalent K-grouped 1x1 convolution,
    shape (K, 4, 1, 1).
    """

    def __init__(self, weight: Tensor, bias: Optional[Tensor] = None):
        if weight.ndim != 4 or weight.shape[1:] != (4, 1, 1):
            raise DimensionError(
                f"fixed fusion weights must be (K,4,1,1), got {weight.shape}"
            )
        k = weight.shape[0]
        if bias is not None and bias.shape != (k,):
            raise DimensionError(f"fusion bias shape {bias.shape} != ({k},)")
        self.weight = weight
        self.bias = bias

    @classmethod
    def from_matrix(cls, weights, bias=None) -> "FixedFusionParams":
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 4:
            raise DimensionError(f"expected a (K,4) weight matrix, got {w.shape}")
        bt = None if bias is None else Tensor(np.asarray(bias, dtype=np.float64))
        return cls(Tensor(w.reshape(w.shape[0], 4, 1, 1)), bt)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def as_matrix(self) -> np.ndarray:
        """The (K,4) weight view: row i is (w1_i, w2_i, w3_i, w4_i)."""
        return self.weight.data.reshape(self.num_classes, 4)

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


@dataclass
class FusionWeights:
    """Per-location fusion weight field, N x 4K x H x W.

    ``spatially_constant`` marks fields that carry one weight vector per
    sample broadcast over all locations.
    """

    psi: Tensor
    spatially_constant: bool = False

    def __post_init__(self):
        if self.psi.ndim != 4 or self.psi.shape[1] % 4 != 0:
            raise DimensionError(
                f"fusion weights must be N,4K,H,W, got {self.psi.shape}"
            )


class SideNormBlock:
    """1x1 conv -> batch norm -> upsample to full resolution.

    The batch norm stage is what rescales multi-level responses to a common
    magnitude; it can be disabled (``use_bn=False``) to reproduce the
    unnormalized variant.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        factor: int,
        rng: np.random.Generator,
        use_bn: bool = True,
        upsample_kind: str = "bilinear_fixed",
    ):
        if factor < 1:
            raise ConfigError(f"upsample factor must be >= 1, got {factor}")
        self.conv = Conv2d(in_channels, out_channels, 1, rng, bias=True)
        self.bn = BatchNorm2d(out_channels) if use_bn else None
        self.up = Upsample(out_channels, factor, upsample_kind)
        self.factor = factor

    def forward(self, x: Tensor, mode: str) -> Tensor:
        out = self.conv.forward(x)
        if self.bn is not None:
            out = self.bn.forward(out, mode)
        return self.up.forward(out)

    def named_parameters(self, prefix: str):
        out = self.conv.named_parameters(f"{prefix}.conv")
        if self.bn is not None:
            out += self.bn.named_parameters(f"{prefix}.bn")
        out += self.up.named_parameters(f"{prefix}.up")
        return out

    def named_buffers(self, prefix: str):
        out = []
        if self.bn is not None:
            out += self.bn.named_buffers(f"{prefix}.bn")
        out += self.up.named_buffers(f"{prefix}.up")
        return out


def shared_concat(sides: SideOutputs) -> ConcatMap:
    """Replicate the three low-level maps once per category.

    Group i of the output holds (high_i, low1, low2, low3).  The gradient
    of each replicated low-level map is the sum over its K copies.
    """
    a1, a2, a3, a5 = sides.a_side1, sides.a_side2, sides.a_side3, sides.a_side5
    n, k, h, w = a5.shape
    out = np.empty((n, 4 * k, h, w))
    out[:, 0::4] = a5.data
    out[:, 1::4] = a1.data
    out[:, 2::4] = a2.data
    out[:, 3::4] = a3.data

    def bwd(g):
        return (
            g[:, 1::4].sum(axis=1, keepdims=True),
            g[:, 2::4].sum(axis=1, keepdims=True),
            g[:, 3::4].sum(axis=1, keepdims=True),
            g[:, 0::4].copy(),
        )

    cat = make_op("shared_concat", (a1, a2, a3, a5), out, bwd)
    return ConcatMap(cat, k)


def fixed_fuse(cat: ConcatMap, params: FixedFusionParams) -> Tensor:
    """Linear per-category fusion: one scalar weight per concatenated channel.

    Exactly a K-grouped 1x1 convolution, so channel i of the result is
    ``w1_i*high_i + w2_i*low1 + w3_i*low2 + w4_i*low3`` (+ bias when present).
    """
    k = cat.num_classes
    if params.num_classes != k:
        raise DimensionError(
            f"fusion params sized for K={params.num_classes}, map has K={k}"
        )
    return conv2d(cat.a_cat, params.weight, params.bias, groups=k)


def group_channel_sum(x: Tensor, group_size: int) -> Tensor:
    """Sum each consecutive block of ``group_size`` channels."""
    n, c, h, w = x.shape
    if c % group_size != 0:
        raise ConfigError(f"channels {c} not divisible by group size {group_size}")
    groups = c // group_size
    out = x.data.reshape(n, groups, group_size, h, w).sum(axis=2)

    def bwd(g):
        return (
            np.repeat(g[:, :, None], group_size, axis=2).reshape(n, c, h, w),
        )

    return make_op("group_channel_sum", (x,), out, bwd)


def broadcast_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """Broadcast an (N,C) vector to (N,C,H,W); gradient sums over H,W."""
    if v.ndim != 2:
        raise DimensionError(f"broadcast_spatial expects (N,C), got {v.shape}")
    n, c = v.shape
    out = np.broadcast_to(v.data[:, :, None, None], (n, c, height, width)).copy()

    def bwd(g):
        return (g.sum(axis=(2, 3)),)

    return make_op("broadcast_spatial", (v,), out, bwd)


def constant_fusion_weights(
    params: FixedFusionParams, n: int, height: int, width: int
) -> FusionWeights:
    """Lift fixed fusion weights into a spatially-constant weight field."""
    flat = Tensor(
        np.tile(params.as_matrix().reshape(1, -1), (n, 1)),
        requires_grad=False,
    )
    return FusionWeights(
        broadcast_spatial(flat, height, width), spatially_constant=True
    )


class InvariantWeightLearner:
    """Predicts one 4K fusion-weight vector per sample from the feature map.

    Global average pooling makes the prediction independent of where
    activations sit; two FC+BN+ReLU blocks and a final FC+BN produce the
    vector, which is broadcast over all locations.  No terminal nonlinearity
    is applied.
    """

    def __init__(
        self,
        num_classes: int,
        rng: np.random.Generator,
        hidden: Optional[int] = None,
    ):
        c = 4 * num_classes
        h = c if hidden is None else hidden
        self.fc1 = Linear(c, h, rng)
        self.bn1 = BatchNorm2d(h)
        self.fc2 = Linear(h, h, rng)
        self.bn2 = BatchNorm2d(h)
        self.fc3 = Linear(h, c, rng)
        self.bn3 = BatchNorm2d(c)
        self.in_channels = c

    def _bn_vec(self, bn: BatchNorm2d, v: Tensor, mode: str) -> Tensor:
        n, c = v.shape
        return reshape(bn.forward(reshape(v, (n, c, 1, 1)), mode), (n, c))

    def forward(self, x: Tensor, mode: str) -> FusionWeights:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"learner expects {self.in_channels} channels, got {x.shape}"
            )
        n, _, height, width = x.shape
        v = global_avg_pool(x)
        v = relu(self._bn_vec(self.bn1, self.fc1.forward(v), mode))
        v = relu(self._bn_vec(self.bn2, self.fc2.forward(v), mode))
        v = self._bn_vec(self.bn3, self.fc3.forward(v), mode)
        return FusionWeights(
            broadcast_spatial(v, height, width), spatially_constant=True
        )

    def named_parameters(self, prefix: str):
        out = []
        for name in ("fc1", "bn1", "fc2", "bn2", "fc3", "bn3"):
            out += getattr(self, name).named_parameters(f"{prefix}.{name}")
        return out

    def named_buffers(self, prefix: str):
        out = []
        for name in ("bn1", "bn2", "bn3"):
            out += getattr(self, name).named_buffers(f"{prefix}.{name}")
        return out


class AdaptiveWeightLearner:
    """Predicts 4K fusion weights at every spatial location.

    All convolutions are 1x1, so the weights at (s,t) depend on the feature
    column at (s,t) only (given frozen normalization statistics).  Structure
    mirrors the invariant learner: two conv+BN+ReLU blocks, then conv+BN,
    no terminal nonlinearity.
    """

    def __init__(
        self,
        num_classes: int,
        rng: np.random.Generator,
        hidden: Optional[int] = None,
    ):
        c = 4 * num_classes
        h = c if hidden is None else hidden
        self.conv1 = Conv2d(c, h, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(h)
        self.conv2 = Conv2d(h, h, 1, rng, bias=False)
        self.bn2 = BatchNorm2d(h)
        self.conv3 = Conv2d(h, c, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(c)
        self.in_channels = c

    def forward(self, x: Tensor, mode: str) -> FusionWeights:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"learner expects {self.in_channels} channels, got {x.shape}"
            )
        out = relu(self.bn1.forward(self.conv1.forward(x), mode))
        out = relu(self.bn2.forward(self.conv2.forward(out), mode))
        out = self.bn3.forward(self.conv3.forward(out), mode)
        return FusionWeights(out, spatially_constant=False)

    def named_parameters(self, prefix: str):
        out = []
        for name in ("conv1", "bn1", "conv2", "bn2", "conv3", "bn3"):
            out += getattr(self, name).named_parameters(f"{prefix}.{name}")
        return out

    def named_buffers(self, prefix: str):
        out = []
        for name in ("bn1", "bn2", "bn3"):
            out += getattr(self, name).named_buffers(f"{prefix}.{name}")
        return out


def softmax_constrain(w: FusionWeights) -> FusionWeights:
    """Force each 4-weight category group to sum to 1 at every location."""
    return FusionWeights(
        softmax_group(w.psi, 4), spatially_constant=w.spatially_constant
    )


def dynamic_fuse(cat: ConcatMap, w: FusionWeights) -> Tensor:
    """Fuse with per-location weights: multiply elementwise, sum per category.

    With spatially-constant weights equal to some fixed fusion matrix this
    reduces exactly to :func:`fixed_fuse` without bias.
    """
    if w.psi.shape != cat.a_cat.shape:
        raise DimensionError(
            f"weight field shape {w.psi.shape} != concat map shape {cat.a_cat.shape}"
        )
    return group_channel_sum(mul(cat.a_cat, w.psi), 4)
