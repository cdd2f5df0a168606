"""Synthetic benchmark harness: dataset generation, training loop,
checkpoint evaluation and the six-row fusion ablation.

Datasets are directories of (color image, class map, instance map) triples;
geometric shapes (ellipses, rectangles, triangles) painted over a flat
background with per-class base colors plus Gaussian noise.  The first 80%
of images by index are the training split, the rest validation.
"""

from __future__ import annotations

import colorsys
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .config import parse_bool, read_kv_file, write_kv_file
from .errors import ConfigError, DimensionError, NumericError
from .evaluation import (
    EvalReport,
    SegSample,
    mf_ods,
    resolve_workers,
    seg_to_edges,
)
from .model import (
    DFFModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)
from .optim import SGD, poly_lr
from .pnm import read_pnm, write_pgm16, write_ppm8, write_prob_pgm
from .tensor import Tensor, backward

TOTAL_STRIDE = 8
DATASET_MANIFEST = "dataset.txt"

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the synthetic shape dataset.

    The appearance statistics deliberately vary between images and between
    regions of one image: per-image noise level in [1, noise], a per-image
    clutter budget up to ``clutter`` (thin random-color strokes that create
    image gradients without touching the labels, concentrated around a few
    cluster centers), illumination gradients and background jitter.  A
    single global fusion recipe cannot be optimal for all of it, which is
    the regime input-conditioned fusion is for.
    """

    num_images: int = 250
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_shapes: int = 2
    max_shapes: int = 5
    shape_kinds: Tuple[str, ...] = SHAPE_KINDS
    overlap: bool = False
    noise: float = 16.0
    clutter: int = 16
    illumination: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 1:
            raise ConfigError(f"num_images must be >= 1, got {self.num_images}")
        if self.height % TOTAL_STRIDE or self.width % TOTAL_STRIDE:
            raise ConfigError(
                f"image size {self.height}x{self.width} must be divisible by 8"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(
                f"bad shapes-per-image range [{self.min_shapes}, {self.max_shapes}]"
            )
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if not self.shape_kinds or unknown:
            raise ConfigError(f"unknown shape kinds {sorted(unknown)}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.clutter < 0:
            raise ConfigError(f"clutter must be >= 0, got {self.clutter}")

    def to_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "min_shapes": self.min_shapes,
            "max_shapes": self.max_shapes,
            "shape_kinds": ",".join(self.shape_kinds),
            "overlap": str(self.overlap).lower(),
            "noise": self.noise,
            "clutter": self.clutter,
            "illumination": str(self.illumination).lower(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        cfg = cls(
            num_images=int(d.get("num_images", 250)),
            height=int(d.get("height", 64)),
            width=int(d.get("width", 64)),
            num_classes=int(d.get("num_classes", 3)),
            min_shapes=int(d.get("min_shapes", 2)),
            max_shapes=int(d.get("max_shapes", 5)),
            shape_kinds=tuple(
                s.strip() for s in str(d.get("shape_kinds", ",".join(SHAPE_KINDS))).split(",")
            ),
            overlap=parse_bool(str(d.get("overlap", "false")), "overlap"),
            noise=float(d.get("noise", 16.0)),
            clutter=int(d.get("clutter", 16)),
            illumination=parse_bool(str(d.get("illumination", "true")), "illumination"),
            seed=int(d.get("seed", 0)),
        )
        cfg.validate()
        return cfg


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed, evenly hue-spaced base colors; row 0 is the background."""
    colors = [(110, 110, 110)]
    for k in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb((k / num_classes + 0.08) % 1.0, 0.65, 0.85)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.array(colors, dtype=np.float64)


def _shape_mask(rng: np.random.Generator, kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    scale = min(h, w)
    if kind == "ellipse":
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        ay = rng.uniform(0.10, 0.30) * scale
        ax = rng.uniform(0.10, 0.30) * scale
        return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    if kind == "rectangle":
        hh = rng.uniform(0.15, 0.45) * scale
        ww = rng.uniform(0.15, 0.45) * scale
        y0 = rng.uniform(0.05, 0.95) * h - hh / 2
        x0 = rng.uniform(0.05, 0.95) * w - ww / 2
        return (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
    # triangle: three vertices, redrawn until the area is non-degenerate
    for _ in range(20):
        pts = rng.uniform([0, 0], [h, w], size=(3, 2))
        area = 0.5 * abs(
            (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
            - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
        )
        if area >= 0.02 * h * w:
            break
    mask = np.ones((h, w), dtype=bool)
    for i in range(3):
        a, b = pts[i], pts[(i + 1) % 3]
        c = pts[(i + 2) % 3]
        # keep the half-plane containing the third vertex
        side = (yy - a[0]) * (b[1] - a[1]) - (xx - a[1]) * (b[0] - a[0])
        ref = (c[0] - a[0]) * (b[1] - a[1]) - (c[1] - a[1]) * (b[0] - a[0])
        mask &= (side * ref) >= 0
    return mask


def _stroke_mask(
    rng: np.random.Generator, h: int, w: int, center: np.ndarray, spread: float
) -> np.ndarray:
    """A thin line segment near ``center``, as a boolean pixel mask."""
    p0 = center + rng.normal(0.0, spread, size=2)
    p1 = p0 + rng.normal(0.0, spread, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    d = p1 - p0
    length2 = max(float(d @ d), 1e-9)
    # distance from each pixel to the segment p0-p1
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / length2, 0.0, 1.0)
    dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
    return dist2 <= 0.6**2


def _render_sample(rng: np.random.Generator, cfg: SynthConfig, palette: np.ndarray):
    h, w = cfg.height, cfg.width
    class_map = np.zeros((h, w), dtype=np.int32)
    inst_map = np.zeros((h, w), dtype=np.int32)
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    placed = 0
    for _ in range(n_shapes):
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        cls = int(rng.integers(1, cfg.num_classes + 1))
        mask = None
        for _attempt in range(40):
            candidate = _shape_mask(rng, kind, h, w)
            if not candidate.any():
                continue
            if cfg.overlap or not (candidate & (inst_map > 0)).any():
                mask = candidate
                break
        if mask is None:
            continue
        placed += 1
        class_map[mask] = cls
        inst_map[mask] = placed

    image = palette[class_map].copy()
    # per-image background jitter: scene appearance varies across the set
    image[class_map == 0] += rng.uniform(-25.0, 25.0, size=3)
    # non-semantic clutter: painted on the image only, never on the labels;
    # strokes cluster around a few centers so some regions stay clean
    n_strokes = int(rng.integers(0, cfg.clutter + 1))
    if n_strokes:
        n_centers = int(rng.integers(1, 4))
        centers = rng.uniform([0, 0], [h, w], size=(n_centers, 2))
        spread = 0.18 * min(h, w)
        for s in range(n_strokes):
            stroke = _stroke_mask(rng, h, w, centers[s % n_centers], spread)
            image[stroke] = rng.uniform(0, 255, size=3)
    if cfg.illumination:
        base = rng.uniform(0.65, 1.25)
        angle = rng.uniform(0, 2 * np.pi)
        strength = rng.uniform(-0.35, 0.35)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(angle) * yy / h + np.sin(angle) * xx / w) * strength
        image *= (base + ramp)[:, :, None]
    # per-image noise level: some images are clean, some are not
    sigma = rng.uniform(1.0, max(cfg.noise, 1.0))
    image += rng.normal(0.0, sigma, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, class_map, inst_map


def gen_dataset(cfg: SynthConfig, out_dir: Union[str, Path]) -> Path:
    """Generate and write the synthetic dataset; deterministic in the seed.

    Regenerates (bounded retries) until every class appears in at least
    one image.
    """
    cfg.validate()
    palette = class_palette(cfg.num_classes)
    samples = None
    for attempt in range(20):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, attempt)))
        candidate = [_render_sample(rng, cfg, palette) for _ in range(cfg.num_images)]
        present = set()
        for _, cm, _ in candidate:
            present.update(np.unique(cm).tolist())
        if set(range(1, cfg.num_classes + 1)) <= present:
            samples = candidate
            break
    if samples is None:
        raise ConfigError(
            "failed to cover every class; enlarge the dataset or shape range"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (image, cm, im) in enumerate(samples):
        stem = f"img_{i:05d}"
        write_ppm8(out / f"{stem}.ppm", image)
        write_pgm16(out / f"{stem}_class.pgm", cm.astype(np.uint16))
        write_pgm16(out / f"{stem}_inst.pgm", im.astype(np.uint16))
    write_kv_file(out / DATASET_MANIFEST, cfg.to_dict())
    return out


@dataclass
class DatasetItem:
    """One loaded sample: image in [0,1], 8-connected edge labels, raw maps."""

    stem: str
    image: np.ndarray  # (3,H,W) float64
    edges: np.ndarray  # (K,H,W) uint8, instance-sensitive
    class_map: np.ndarray
    instance_map: np.ndarray


def load_dataset(
    data_dir: Union[str, Path], instance_sensitive: bool = True
) -> Tuple[list[DatasetItem], SynthConfig]:
    data_dir = Path(data_dir)
    manifest = data_dir / DATASET_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {DATASET_MANIFEST} in {data_dir}")
    cfg = SynthConfig.from_dict(read_kv_file(manifest))
    items = []
    for i in range(cfg.num_images):
        stem = f"img_{i:05d}"
        rgb = read_pnm(data_dir / f"{stem}.ppm")
        cm = read_pnm(data_dir / f"{stem}_class.pgm").astype(np.int32)
        im = read_pnm(data_dir / f"{stem}_inst.pgm").astype(np.int32)
        edges = seg_to_edges(SegSample(cm, im), cfg.num_classes, instance_sensitive)
        image = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
        items.append(DatasetItem(stem, image, edges, cm, im))
    return items, cfg


def split_dataset(items: Sequence[DatasetItem]):
    """80/20 train/validation split by index."""
    n_train = int(round(0.8 * len(items)))
    n_train = min(max(n_train, 1), len(items) - 1) if len(items) > 1 else len(items)
    return list(items[:n_train]), list(items[n_train:])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters and flags of one training run."""

    base_lr: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    crop_size: int = 56
    seed: int = 1
    fusion_mode: str = "adaptive"
    softmax: bool = False
    normalizer: bool = True
    widths: Tuple[int, int, int, int] = (8, 16, 32, 64)
    learner_hidden: Optional[int] = None
    upsample_kind: str = "bilinear_fixed"
    lr_power: float = 0.9
    beta_override: Optional[float] = None
    mirror: bool = True
    scale_aug: bool = False

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be >= 0")
        if self.crop_size < TOTAL_STRIDE or self.crop_size % TOTAL_STRIDE:
            raise ConfigError(
                f"crop_size must be a positive multiple of 8, got {self.crop_size}"
            )
        # surface model-config mistakes before any data is touched
        self.model_config(num_classes=2).validate()

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "crop_size": self.crop_size,
            "seed": self.seed,
            "fusion_mode": self.fusion_mode,
            "softmax": str(self.softmax).lower(),
            "normalizer": str(self.normalizer).lower(),
            "widths": ",".join(str(w) for w in self.widths),
            "learner_hidden": (
                "default" if self.learner_hidden is None else self.learner_hidden
            ),
            "upsample_kind": self.upsample_kind,
            "lr_power": self.lr_power,
            "beta_override": (
                "none" if self.beta_override is None else self.beta_override
            ),
            "mirror": str(self.mirror).lower(),
            "scale_aug": str(self.scale_aug).lower(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        def opt_float(key):
            v = str(d.get(key, "none"))
            return None if v == "none" else float(v)

        hidden = str(d.get("learner_hidden", "default"))
        cfg = cls(
            base_lr=float(d.get("base_lr", 0.05)),
            epochs=int(d.get("epochs", 30)),
            batch_size=int(d.get("batch_size", 8)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
            crop_size=int(d.get("crop_size", 56)),
            seed=int(d.get("seed", 1)),
            fusion_mode=str(d.get("fusion_mode", "adaptive")),
            softmax=parse_bool(str(d.get("softmax", "false")), "softmax"),
            normalizer=parse_bool(str(d.get("normalizer", "true")), "normalizer"),
            widths=tuple(int(w) for w in str(d.get("widths", "8,16,32,64")).split(",")),
            learner_hidden=None if hidden == "default" else int(hidden),
            upsample_kind=str(d.get("upsample_kind", "bilinear_fixed")),
            lr_power=float(d.get("lr_power", 0.9)),
            beta_override=opt_float("beta_override"),
            mirror=parse_bool(str(d.get("mirror", "true")), "mirror"),
            scale_aug=parse_bool(str(d.get("scale_aug", "false")), "scale_aug"),
        )
        cfg.validate()
        return cfg

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            fusion_mode=self.fusion_mode,
            softmax_constraint=self.softmax,
            normalizer=self.normalizer,
            widths=self.widths,
            image_size=(self.crop_size, self.crop_size),
            upsample_kind=self.upsample_kind,
            learner_hidden=self.learner_hidden,
        )


@dataclass
class RunRecord:
    """Outcome of one training run."""

    loss_trace: list[float]
    checkpoint_path: str
    config: dict
    wall_clock: float
    report: Optional[EvalReport] = None

    def save_json(self, path: Union[str, Path]) -> None:
        payload = {
            "loss_trace": self.loss_trace,
            "checkpoint_path": self.checkpoint_path,
            "config": self.config,
            "wall_clock": self.wall_clock,
        }
        if self.report is not None:
            payload["mean_mf"] = self.report.mean_mf
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _nearest_resize(arr: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    iy = np.minimum((np.arange(nh) + 0.5) * h / nh, h - 1).astype(np.intp)
    ix = np.minimum((np.arange(nw) + 0.5) * w / nw, w - 1).astype(np.intp)
    return arr[..., iy[:, None], ix[None, :]]


def _augment(
    item: DatasetItem,
    crop: int,
    rng: np.random.Generator,
    mirror: bool,
    scale_aug: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Jointly crop/mirror (and optionally rescale) image and edge label."""
    image, edges = item.image, item.edges
    if scale_aug:
        s = rng.uniform(0.75, 2.0)
        h, w = image.shape[-2:]
        nh, nw = max(crop, int(round(h * s))), max(crop, int(round(w * s)))
        image = _nearest_resize(image, nh, nw)
        cm = _nearest_resize(item.class_map, nh, nw)
        im = _nearest_resize(item.instance_map, nh, nw)
        edges = seg_to_edges(SegSample(cm, im), edges.shape[0])
    h, w = image.shape[-2:]
    if h < crop or w < crop:
        raise ConfigError(f"crop {crop} larger than image {h}x{w}")
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    image = image[:, oy : oy + crop, ox : ox + crop]
    edges = edges[:, oy : oy + crop, ox : ox + crop]
    if mirror and rng.random() < 0.5:
        image = image[:, :, ::-1]
        edges = edges[:, :, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(edges)


def train(
    cfg: TrainConfig,
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
) -> RunRecord:
    """Train one model on the dataset's training split.

    SGD with momentum, coupled weight decay and per-iteration poly learning
    rate decay; horizontal mirroring and random crops as augmentation.
    Saves a checkpoint directory plus a run.json trace; raises
    :class:`NumericError` if the loss leaves the finite range.
    """
    cfg.validate()
    items, synth = load_dataset(data_dir)
    train_items, _ = split_dataset(items)
    if cfg.crop_size > min(synth.height, synth.width):
        raise ConfigError(
            f"crop_size {cfg.crop_size} exceeds image size "
            f"{synth.height}x{synth.width}"
        )
    model = build_model(cfg.model_config(synth.num_classes), cfg.seed)
    opt = SGD(
        model.parameters(), cfg.base_lr, cfg.momentum, cfg.weight_decay
    )
    data_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x0DA7A)))

    n = len(train_items)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    max_iter = cfg.epochs * steps_per_epoch
    start = time.perf_counter()
    loss_trace = []
    iteration = 0
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(n)
        epoch_losses = []
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            images, labels = [], []
            for i in idx:
                img, lab = _augment(
                    train_items[i], cfg.crop_size, data_rng, cfg.mirror, cfg.scale_aug
                )
                images.append(img)
                labels.append(lab)
            batch = Tensor(np.stack(images))
            y = np.stack(labels)
            out = model.forward(batch, "train")
            loss = total_loss(out, y, cfg.beta_override)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch} "
                    f"step {step} (batch indices {idx.tolist()})"
                )
            lr = poly_lr(cfg.base_lr, iteration, max_iter, cfg.lr_power)
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            iteration += 1
            epoch_losses.append(loss_value)
        loss_trace.append(float(np.mean(epoch_losses)))

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(model, out_path / "checkpoint")
    record = RunRecord(
        loss_trace=loss_trace,
        checkpoint_path=str(ckpt),
        config=cfg.to_dict(),
        wall_clock=time.perf_counter() - start,
    )
    record.save_json(out_path / "run.json")
    return record


# ---------------------------------------------------------------------------
# evaluation over the validation split
# ---------------------------------------------------------------------------

def _quantize16(prob: np.ndarray) -> np.ndarray:
    """Snap probabilities to the 16-bit grid used by prediction dumps."""
    return np.rint(np.clip(prob, 0.0, 1.0) * 65535.0) / 65535.0


def predict_probabilities(
    model: DFFModel, items: Sequence[DatasetItem], batch_size: int = 8
) -> Tuple[list[np.ndarray], list[np.ndarray]]:
    """Eval-mode fused and side5 sigmoid probabilities, per image.

    Values are quantized to the 16-bit dump grid, so evaluating in memory
    and evaluating dumped .pgm files give identical reports.
    """
    fuse, side5 = [], []
    for begin in range(0, len(items), batch_size):
        chunk = items[begin : begin + batch_size]
        batch = Tensor(np.stack([it.image for it in chunk]))
        out = model.forward(batch, "eval")
        pf = _quantize16(expit(out.a_fuse.data))
        ps = _quantize16(expit(out.a_side5.data))
        for j in range(len(chunk)):
            fuse.append(pf[j])
            side5.append(ps[j])
    return fuse, side5


def evaluate(
    checkpoint: Union[str, Path],
    data_dir: Union[str, Path],
    tolerance: float = 0.02,
    thresholds: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
    thin: bool = False,
) -> Tuple[EvalReport, EvalReport]:
    """Evaluate a checkpoint on the validation split.

    Returns (fused report, side5 report); the side5 report probes how much
    the fusion head adds over the directly supervised top level.
    """
    model = load_checkpoint(checkpoint)
    items, _ = load_dataset(data_dir)
    _, val_items = split_dataset(items)
    fuse, side5 = predict_probabilities(model, val_items)
    gts = [it.edges for it in val_items]
    report_fuse = mf_ods(fuse, gts, tolerance, thresholds, workers, thin)
    report_side5 = mf_ods(side5, gts, tolerance, thresholds, workers, thin)
    return report_fuse, report_side5


def dump_predictions(
    checkpoint: Union[str, Path],
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
) -> list[str]:
    """Write per-class 16-bit PGM probability maps for the validation split."""
    model = load_checkpoint(checkpoint)
    items, _ = load_dataset(data_dir)
    _, val_items = split_dataset(items)
    fuse, _ = predict_probabilities(model, val_items)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stems = []
    for item, prob in zip(val_items, fuse):
        for k in range(prob.shape[0]):
            write_prob_pgm(out / f"{item.stem}_{k + 1}.pgm", prob[k])
        stems.append(item.stem)
    return stems


def infer_image(
    checkpoint: Union[str, Path],
    image_path: Union[str, Path],
    out_dir: Union[str, Path],
) -> list[Path]:
    """Run one image through a checkpoint and dump per-class edge maps."""
    model = load_checkpoint(checkpoint)
    raw = read_pnm(image_path)
    if raw.ndim == 2:  # grayscale: replicate to three channels
        raw = np.stack([raw] * 3, axis=-1)
    image = raw.astype(np.float64).transpose(2, 0, 1) / 255.0
    batch = Tensor(image[None])
    out = model.forward(batch, "eval")
    prob = _quantize16(expit(out.a_fuse.data[0]))
    stem = Path(image_path).stem
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(prob.shape[0]):
        p = out_path / f"{stem}_{k + 1}.pgm"
        write_prob_pgm(p, prob[k])
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# ablation: the six fusion configurations
# ---------------------------------------------------------------------------

ABLATION_ROWS: Tuple[Tuple[str, dict], ...] = (
    ("baseline", {"fusion_mode": "fixed", "normalizer": False}),
    ("normalizer", {"fusion_mode": "fixed", "normalizer": True}),
    ("invariant", {"fusion_mode": "invariant", "normalizer": True}),
    (
        "adaptive_softmax",
        {"fusion_mode": "adaptive", "normalizer": True, "softmax": True},
    ),
    ("adaptive", {"fusion_mode": "adaptive", "normalizer": True}),
    ("adaptive_no_norm", {"fusion_mode": "adaptive", "normalizer": False}),
)


@dataclass
class AblationResult:
    """Mean MF per configuration row and seed, plus the trend summary."""

    labels: list[str]
    seeds: list[int]
    mf: dict  # label -> {seed: mean MF}
    checkpoints: dict = field(default_factory=dict)  # (label, seed) -> path

    def mean(self, label: str) -> float:
        return float(np.mean([self.mf[label][s] for s in self.seeds]))

    def sd(self, label: str) -> float:
        return float(np.std([self.mf[label][s] for s in self.seeds]))

    def seeds_where_greater(self, a: str, b: str) -> int:
        """Number of seeds on which row ``a`` scores above row ``b``."""
        return sum(1 for s in self.seeds if self.mf[a][s] > self.mf[b][s])

    def to_text(self) -> str:
        base = self.mean("baseline")
        lines = ["row                 mean MF    sd        delta  per-seed"]
        for label in self.labels:
            per_seed = " ".join(f"{self.mf[label][s]:.4f}" for s in self.seeds)
            lines.append(
                f"{label:<18}  {self.mean(label):7.4f}  {self.sd(label):7.4f}  "
                f"{self.mean(label) - base:+7.4f}  {per_seed}"
            )
        n = len(self.seeds)
        lines.append(
            f"trend adaptive > baseline: "
            f"{self.seeds_where_greater('adaptive', 'baseline')}/{n} seeds"
        )
        lines.append(
            f"trend adaptive_no_norm < adaptive: "
            f"{self.seeds_where_greater('adaptive', 'adaptive_no_norm')}/{n} seeds"
        )
        return "\n".join(lines)

    def write_csv(self, path: Union[str, Path]) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["row", "seed", "mean_mf"])
            for label in self.labels:
                for s in self.seeds:
                    writer.writerow([label, s, f"{self.mf[label][s]:.6f}"])


def run_single(
    base_cfg: TrainConfig,
    overrides: dict,
    seed: int,
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
    tolerance: float = 0.02,
    eval_workers: int = 1,
) -> Tuple[float, str]:
    """Train + evaluate one configuration; returns (mean MF, checkpoint path)."""
    cfg = replace(base_cfg, seed=seed, **overrides)
    record = train(cfg, data_dir, out_dir)
    report, _ = evaluate(
        record.checkpoint_path, data_dir, tolerance, workers=eval_workers
    )
    record.report = report
    record.save_json(Path(out_dir) / "run.json")
    return report.mean_mf, record.checkpoint_path


def _ablation_worker(args):
    label, overrides, seed, base_dict, data_dir, out_dir, tolerance = args
    base_cfg = TrainConfig.from_dict(base_dict)
    mean_mf, ckpt = run_single(
        base_cfg, overrides, seed, data_dir, out_dir, tolerance, eval_workers=1
    )
    return label, seed, mean_mf, ckpt


def ablation(
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
    seeds: Sequence[int] = (1, 2, 3),
    base_cfg: Optional[TrainConfig] = None,
    tolerance: float = 0.02,
    jobs: Optional[int] = None,
) -> AblationResult:
    """Train and evaluate all six fusion rows on the shared seeds.

    Independent runs execute in parallel worker processes (results are
    deterministic per run, so the aggregate is order-independent).
    """
    if base_cfg is None:
        base_cfg = TrainConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for label, overrides in ABLATION_ROWS:
        for seed in seeds:
            run_dir = out / f"{label}_seed{seed}"
            tasks.append(
                (label, overrides, seed, base_cfg.to_dict(), str(data_dir),
                 str(run_dir), tolerance)
            )
    jobs = resolve_workers(jobs)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_ablation_worker, tasks, chunksize=1))
    else:
        outcomes = [_ablation_worker(t) for t in tasks]

    result = AblationResult(
        labels=[label for label, _ in ABLATION_ROWS],
        seeds=list(seeds),
        mf={label: {} for label, _ in ABLATION_ROWS},
    )
    for label, seed, mean_mf, ckpt in outcomes:
        result.mf[label][seed] = mean_mf
        result.checkpoints[(label, seed)] = ckpt
    (out / "ablation.txt").write_text(result.to_text() + "\n")
    result.write_csv(out / "ablation.csv")
    return result
