"""Toy residual backbone, side-branch wiring, full model assembly and the
reweighted multi-label edge loss.

The backbone is a stem plus four residual stacks at strides 1,2,2,2 (total
stride 8); the stage between stride-4 and the top is deliberately absent so
the side taps mirror the low1/low2/low3/high layout used by the fusion
module.  Side outputs and the fused output are logits; sigmoid lives in the
loss and in inference code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from . import dft
from .config import parse_bool, read_kv_file, write_kv_file
from .errors import ConfigError, DimensionError
from .fusion import (
    AdaptiveWeightLearner,
    ConcatMap,
    FixedFusionParams,
    FusionWeights,
    InvariantWeightLearner,
    SideNormBlock,
    SideOutputs,
    dynamic_fuse,
    fixed_fuse,
    shared_concat,
    softmax_constrain,
)
from .ops import BatchNorm2d, Conv2d, he_uniform, relu
from .tensor import Tensor, add, make_op

TOTAL_STRIDE = 8

FUSION_MODES = ("fixed", "invariant", "adaptive")


@dataclass
class ModelConfig:
    """Everything needed to (re)build a model deterministically."""

    num_classes: int
    fusion_mode: str = "adaptive"
    softmax_constraint: bool = False
    normalizer: bool = True
    widths: Tuple[int, int, int, int] = (8, 16, 32, 64)
    image_size: Tuple[int, int] = (64, 64)
    upsample_kind: str = "bilinear_fixed"
    learner_hidden: Optional[int] = None

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        if self.softmax_constraint and self.fusion_mode == "fixed":
            raise ConfigError("softmax constraint requires a dynamic fusion mode")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be 4 positive ints, got {self.widths}")
        if any(s % TOTAL_STRIDE for s in self.image_size):
            raise ConfigError(
                f"image size {self.image_size} not divisible by stride {TOTAL_STRIDE}"
            )
        if self.learner_hidden is not None and self.learner_hidden < 1:
            raise ConfigError(f"learner_hidden must be >= 1, got {self.learner_hidden}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "fusion_mode": self.fusion_mode,
            "softmax": str(self.softmax_constraint).lower(),
            "normalizer": str(self.normalizer).lower(),
            "widths": ",".join(str(w) for w in self.widths),
            "image_height": self.image_size[0],
            "image_width": self.image_size[1],
            "upsample_kind": self.upsample_kind,
            "learner_hidden": (
                "default" if self.learner_hidden is None else self.learner_hidden
            ),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        hidden = d.get("learner_hidden", "default")
        cfg = cls(
            num_classes=int(d["num_classes"]),
            fusion_mode=d.get("fusion_mode", "adaptive"),
            softmax_constraint=parse_bool(str(d.get("softmax", "false")), "softmax"),
            normalizer=parse_bool(str(d.get("normalizer", "true")), "normalizer"),
            widths=tuple(int(w) for w in str(d["widths"]).split(",")),
            image_size=(int(d["image_height"]), int(d["image_width"])),
            upsample_kind=d.get("upsample_kind", "bilinear_fixed"),
            learner_hidden=None if str(hidden) == "default" else int(hidden),
        )
        cfg.validate()
        return cfg


class ResidualBlock:
    """3x3 conv -> BN -> ReLU -> 3x3 conv -> BN, plus a (projected) skip."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        rng: np.random.Generator,
    ):
        self.conv1 = Conv2d(
            in_channels, out_channels, 3, rng, stride=stride, padding=1, bias=False
        )
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv2d(
                in_channels, out_channels, 1, rng, stride=stride, bias=False
            )
            self.proj_bn = BatchNorm2d(out_channels)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor, mode: str) -> Tensor:
        out = relu(self.bn1.forward(self.conv1.forward(x), mode))
        out = self.bn2.forward(self.conv2.forward(out), mode)
        if self.proj is not None:
            skip = self.proj_bn.forward(self.proj.forward(x), mode)
        else:
            skip = x
        return relu(add(out, skip))

    def _children(self):
        names = [("conv1", self.conv1), ("bn1", self.bn1),
                 ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj is not None:
            names += [("proj", self.proj), ("proj_bn", self.proj_bn)]
        return names

    def named_parameters(self, prefix: str):
        out = []
        for name, child in self._children():
            out += child.named_parameters(f"{prefix}.{name}")
        return out

    def named_buffers(self, prefix: str):
        out = []
        for name, child in self._children():
            out += child.named_buffers(f"{prefix}.{name}")
        return out


class Stage:
    """Two residual blocks; the first carries the stride/width change."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        rng: np.random.Generator,
    ):
        self.block1 = ResidualBlock(in_channels, out_channels, stride, rng)
        self.block2 = ResidualBlock(out_channels, out_channels, 1, rng)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return self.block2.forward(self.block1.forward(x, mode), mode)

    def named_parameters(self, prefix: str):
        return self.block1.named_parameters(f"{prefix}.block1") + (
            self.block2.named_parameters(f"{prefix}.block2")
        )

    def named_buffers(self, prefix: str):
        return self.block1.named_buffers(f"{prefix}.block1") + (
            self.block2.named_buffers(f"{prefix}.block2")
        )


@dataclass
class ForwardOutput:
    """Logit heads (and, on request, the fusion intermediates)."""

    a_side5: Tensor
    a_fuse: Tensor
    sides: Optional[SideOutputs] = None
    cat: Optional[ConcatMap] = None
    weights: Optional[FusionWeights] = None


class DFFModel:
    """Backbone + side blocks + one of the three fusion heads.

    Build through :func:`build_model` so initialization is seed-determined.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        k = config.num_classes
        w1, w2, w3, w5 = config.widths
        use_bn = config.normalizer
        up = config.upsample_kind

        self.stem_conv = Conv2d(3, w1, 3, rng, padding=1, bias=False)
        self.stem_bn = BatchNorm2d(w1)
        self.s1 = Stage(w1, w1, 1, rng)
        self.s2 = Stage(w1, w2, 2, rng)
        self.s3 = Stage(w2, w3, 2, rng)
        self.s5 = Stage(w3, w5, 2, rng)

        self.side1 = SideNormBlock(w1, 1, 1, rng, use_bn, up)
        self.side2 = SideNormBlock(w2, 1, 2, rng, use_bn, up)
        self.side3 = SideNormBlock(w3, 1, 4, rng, use_bn, up)
        self.side5 = SideNormBlock(w5, k, 8, rng, use_bn, up)

        self.side5w = None
        self.learner = None
        self.fusion_params = None
        if config.fusion_mode == "fixed":
            # symmetric averaging init: learned weight asymmetries then
            # reflect the training signal rather than the initial draw
            weight = Tensor(np.full((k, 4, 1, 1), 0.25), requires_grad=True)
            bias = Tensor(np.zeros(k), requires_grad=True)
            self.fusion_params = FixedFusionParams(weight, bias)
        else:
            self.side5w = SideNormBlock(w5, 4 * k, 8, rng, use_bn, up)
            learner_cls = (
                InvariantWeightLearner
                if config.fusion_mode == "invariant"
                else AdaptiveWeightLearner
            )
            self.learner = learner_cls(k, rng, hidden=config.learner_hidden)

    def _children(self):
        out = [
            ("stem_conv", self.stem_conv),
            ("stem_bn", self.stem_bn),
            ("s1", self.s1),
            ("s2", self.s2),
            ("s3", self.s3),
            ("s5", self.s5),
            ("side1", self.side1),
            ("side2", self.side2),
            ("side3", self.side3),
            ("side5", self.side5),
        ]
        if self.side5w is not None:
            out.append(("side5w", self.side5w))
        if self.learner is not None:
            out.append(("learner", self.learner))
        if self.fusion_params is not None:
            out.append(("fusion", self.fusion_params))
        return out

    def named_parameters(self):
        out = []
        for name, child in self._children():
            out += child.named_parameters(name)
        ids = [id(t) for _, t in out]
        assert len(ids) == len(set(ids)), "parameter registered twice"
        return out

    def named_buffers(self):
        out = []
        for name, child in self._children():
            if hasattr(child, "named_buffers"):
                out += child.named_buffers(name)
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def forward(self, image: Tensor, mode: str = "train",
                return_parts: bool = False) -> ForwardOutput:
        """Run the full network; both returned heads are logits."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected N,3,H,W input, got {image.shape}")
        n, _, h, w = image.shape
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise DimensionError(
                f"input dims {h}x{w} must be divisible by {TOTAL_STRIDE}"
            )

        f0 = relu(self.stem_bn.forward(self.stem_conv.forward(image), mode))
        f1 = self.s1.forward(f0, mode)
        f2 = self.s2.forward(f1, mode)
        f3 = self.s3.forward(f2, mode)
        f5 = self.s5.forward(f3, mode)

        a1 = self.side1.forward(f1, mode)
        a2 = self.side2.forward(f2, mode)
        a3 = self.side3.forward(f3, mode)
        a5 = self.side5.forward(f5, mode)
        for name, t in (("side1", a1), ("side2", a2), ("side3", a3), ("side5", a5)):
            if t.shape[2:] != (h, w):
                raise ConfigError(
                    f"{name} resolution {t.shape[2:]} != input {h, w}; "
                    "upsample factor does not match the stage stride"
                )

        sides = SideOutputs(a1, a2, a3, a5)
        cat = shared_concat(sides)
        weights = None
        if self.config.fusion_mode == "fixed":
            a_fuse = fixed_fuse(cat, self.fusion_params)
        else:
            xw = self.side5w.forward(f5, mode)
            weights = self.learner.forward(xw, mode)
            if self.config.softmax_constraint:
                weights = softmax_constrain(weights)
            a_fuse = dynamic_fuse(cat, weights)

        if return_parts:
            return ForwardOutput(a5, a_fuse, sides, cat, weights)
        return ForwardOutput(a5, a_fuse)


def build_model(config: ModelConfig, seed: int) -> DFFModel:
    """Construct a model with seed-determined parameter initialization."""
    config.validate()
    return DFFModel(config, np.random.default_rng(seed))


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count for a given configuration.

    Derivation (per layer type; BN has gamma+beta = 2c, backbone convs carry
    no bias because BN follows, side 1x1 convs keep their bias, learner
    affinities drop it):

    - stem:          27*w1 + 2*w1
    - block(ci,co):  9*ci*co + 2*co + 9*co^2 + 2*co  [+ ci*co + 2*co if projected]
    - stage(ci,co,s) = block(ci,co, projected when s!=1 or ci!=co) + block(co,co)
    - side(c,o):     c*o + o  [+ 2*o with the normalizer]
    - learner(h):    4K*h + h*h + h*4K + 2*h + 2*h + 2*4K
    - fixed fusion:  4K + K
    - learned upsampling adds o*(2f - f%2)^2 per side block of width o.
    """
    k = config.num_classes
    w1, w2, w3, w5 = config.widths
    bn = 2

    def block(ci, co, projected):
        n = 9 * ci * co + bn * co + 9 * co * co + bn * co
        if projected:
            n += ci * co + bn * co
        return n

    def stage(ci, co, stride):
        return block(ci, co, stride != 1 or ci != co) + block(co, co, False)

    def side(c, o, factor):
        n = c * o + o
        if config.normalizer:
            n += bn * o
        if config.upsample_kind == "learned_transposed":
            kk = 2 * factor - factor % 2
            n += o * kk * kk
        return n

    total = 27 * w1 + bn * w1
    total += stage(w1, w1, 1) + stage(w1, w2, 2) + stage(w2, w3, 2) + stage(w3, w5, 2)
    total += side(w1, 1, 1) + side(w2, 1, 2) + side(w3, 1, 4) + side(w5, k, 8)
    if config.fusion_mode == "fixed":
        total += 4 * k + k
    else:
        total += side(w5, 4 * k, 8)
        h = 4 * k if config.learner_hidden is None else config.learner_hidden
        total += 4 * k * h + h * h + h * 4 * k + bn * h + bn * h + bn * 4 * k
    return total


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def reweighted_bce(
    logits: Tensor,
    labels: np.ndarray,
    beta_override: Optional[float] = None,
) -> Tensor:
    """Class-balanced binary cross-entropy over sigmoid logits.

    For each image and class, beta is the fraction of non-edge pixels; the
    positive term is weighted by beta and the negative term by 1-beta, so
    the sparse edge pixels are not drowned out.  Summed over classes and
    pixels, averaged over the batch.  Uses the log-sum-exp form throughout,
    so large logits stay finite.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != logits.shape:
        raise DimensionError(f"labels shape {y.shape} != logits shape {logits.shape}")
    if not ((y == 0) | (y == 1)).all():
        raise ConfigError("labels must be binary (0/1)")
    y = y.astype(np.float64)
    n, k, h, w = logits.shape
    if beta_override is not None:
        if not 0.0 <= beta_override <= 1.0:
            raise ConfigError(f"beta_override must be in [0,1], got {beta_override}")
        beta = np.full((n, k, 1, 1), float(beta_override))
    else:
        beta = ((1.0 - y).sum(axis=(2, 3), keepdims=True)) / (h * w)

    z = logits.data
    # softplus(+-z) = -log sigmoid(-+z), computed stably
    loss_map = beta * y * np.logaddexp(0.0, -z) + (1.0 - beta) * (1.0 - y) * (
        np.logaddexp(0.0, z)
    )
    total = np.array([loss_map.sum() / n])

    def bwd(g):
        s = expit(z)
        dz = beta * y * (s - 1.0) + (1.0 - beta) * (1.0 - y) * s
        return (dz * (g.reshape(-1)[0] / n),)

    return make_op("reweighted_bce", (logits,), total, bwd)


def total_loss(
    out: ForwardOutput,
    labels: np.ndarray,
    beta_override: Optional[float] = None,
) -> Tensor:
    """Equal-weighted sum of the losses on the side5 head and the fused head."""
    return add(
        reweighted_bce(out.a_side5, labels, beta_override),
        reweighted_bce(out.a_fuse, labels, beta_override),
    )


# ---------------------------------------------------------------------------
# checkpoints: directory of named .dft tensors + manifest + config
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
CONFIG_NAME = "config.txt"


def save_checkpoint(model: DFFModel, directory: Union[str, Path]) -> Path:
    """Write parameters, buffers, manifest and model config to a directory."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in model.named_parameters():
        dft.write_dft(out / f"{name}.dft", t.data)
        shape = "x".join(str(s) for s in t.data.shape)
        lines.append(f"{name}\t{shape}\tparameter")
    for name, arr in model.named_buffers():
        dft.write_dft(out / f"{name}.dft", arr)
        shape = "x".join(str(s) for s in np.asarray(arr).shape)
        lines.append(f"{name}\t{shape}\tbuffer")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    write_kv_file(out / CONFIG_NAME, model.config.to_dict())
    return out


def load_checkpoint(directory: Union[str, Path]) -> DFFModel:
    """Rebuild a model from a checkpoint directory."""
    src = Path(directory)
    if not (src / CONFIG_NAME).is_file():
        raise FileNotFoundError(f"no {CONFIG_NAME} in checkpoint {src}")
    config = ModelConfig.from_dict(read_kv_file(src / CONFIG_NAME))
    model = build_model(config, seed=0)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for line in (src / MANIFEST_NAME).read_text().splitlines():
        if not line.strip():
            continue
        name, _, role = line.split("\t")
        data = dft.read_dft(src / f"{name}.dft")
        if role == "parameter":
            target = params[name]
            if target.data.shape != data.shape:
                raise DimensionError(
                    f"checkpoint {name}: shape {data.shape} != {target.data.shape}"
                )
            target.data = data
        else:
            buf = buffers[name]
            buf[...] = data.reshape(buf.shape)
    return model
