"""Benchmark protocol: ground-truth edge extraction, distance-tolerant
matching, precision/recall curves and maximum F-measure at optimal dataset
scale (one threshold per class, chosen over the whole dataset).

Matching between predicted and ground-truth edge pixels is a
maximum-cardinality bipartite matching on the pairs closer than
``tolerance * image_diagonal``; candidate pairs are enumerated by integer
offset (the grid analogue of spatial bucketing) and the matching itself is
Hopcroft-Karp via scipy.
"""

from __future__ import annotations

import csv
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import ConfigError, DimensionError

DEFAULT_THRESHOLDS = np.round(np.arange(0.01, 1.0, 0.01), 2)


@dataclass
class SegSample:
    """Integer class labels in [0,K] plus instance ids (0 = background)."""

    class_map: np.ndarray
    instance_map: np.ndarray

    def __post_init__(self):
        self.class_map = np.asarray(self.class_map)
        self.instance_map = np.asarray(self.instance_map)
        if self.class_map.shape != self.instance_map.shape:
            raise DimensionError(
                f"class map {self.class_map.shape} != instance map "
                f"{self.instance_map.shape}"
            )
        if self.class_map.ndim != 2:
            raise DimensionError("segmentation maps must be 2-D")


_NEIGHBOR_OFFSETS = [
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
]


def seg_to_edges(
    sample: SegSample, num_classes: int, instance_sensitive: bool = True
) -> np.ndarray:
    """Boundary pixels per class as a (K,H,W) binary array.

    A pixel of class k is an edge pixel iff any 8-neighbor carries a
    different class (or, with ``instance_sensitive``, a different instance
    id).  Junction pixels can be edges in several channels at once across
    the dataset, one channel per adjacent class.
    """
    cm = sample.class_map
    im = sample.instance_map
    h, w = cm.shape
    boundary = np.zeros((h, w), dtype=bool)
    for di, dj in _NEIGHBOR_OFFSETS:
        src = (slice(max(di, 0), h + min(di, 0)), slice(max(dj, 0), w + min(dj, 0)))
        dst = (slice(max(-di, 0), h + min(-di, 0)), slice(max(-dj, 0), w + min(-dj, 0)))
        differs = cm[src] != cm[dst]
        if instance_sensitive:
            differs |= im[src] != im[dst]
        boundary[src] |= differs
    edges = np.zeros((num_classes, h, w), dtype=np.uint8)
    for k in range(1, num_classes + 1):
        edges[k - 1] = (boundary & (cm == k)).astype(np.uint8)
    return edges


@dataclass
class MatchResult:
    """Counts from matching one prediction against one ground truth."""

    tp: int
    fp: int
    fn: int


def _distance_offsets(d: float) -> list[tuple[int, int]]:
    r = int(np.floor(d))
    out = []
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if di * di + dj * dj <= d * d:
                out.append((di, dj))
    return out


def _candidate_pairs(
    pred_pix: np.ndarray, gt_mask: np.ndarray, gt_index: np.ndarray, d: float
) -> tuple[np.ndarray, np.ndarray]:
    """(pred_row, gt_col) index pairs with Euclidean distance <= d."""
    h, w = gt_mask.shape
    rows, cols = [], []
    for di, dj in _distance_offsets(d):
        qi = pred_pix[:, 0] + di
        qj = pred_pix[:, 1] + dj
        ok = (qi >= 0) & (qi < h) & (qj >= 0) & (qj < w)
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        hit = gt_mask[qi[sel], qj[sel]]
        sel = sel[hit]
        if sel.size:
            rows.append(sel)
            cols.append(gt_index[qi[sel], qj[sel]])
    if not rows:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    return np.concatenate(rows), np.concatenate(cols)


def match_edges(pred, gt, tolerance: float) -> MatchResult:
    """Match predicted edge pixels to ground-truth pixels one-to-one.

    The matching has maximum cardinality among all pairings with pairwise
    distance at most ``tolerance * sqrt(H^2 + W^2)``; tp is its size, the
    remaining prediction pixels are fp and the remaining ground-truth
    pixels fn.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} must match, 2-D")
    if not 0.0 < tolerance < 1.0:
        raise ConfigError(f"tolerance must be in (0,1), got {tolerance}")
    h, w = pred.shape
    d = tolerance * float(np.hypot(h, w))
    n_pred = int(pred.sum())
    n_gt = int(gt.sum())
    if n_pred == 0 or n_gt == 0:
        return MatchResult(tp=0, fp=n_pred, fn=n_gt)

    pred_pix = np.argwhere(pred)
    gt_index = np.full((h, w), -1, dtype=np.intp)
    gt_index[gt] = np.arange(n_gt)
    rows, cols = _candidate_pairs(pred_pix, gt, gt_index, d)
    if rows.size == 0:
        return MatchResult(tp=0, fp=n_pred, fn=n_gt)
    graph = csr_matrix(
        (np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n_pred, n_gt)
    )
    matching = maximum_bipartite_matching(graph, perm_type="column")
    tp = int((matching != -1).sum())
    return MatchResult(tp=tp, fp=n_pred - tp, fn=n_gt - tp)


def _f_measure(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        r = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f = np.where(p + r > 0, 2 * p * r / np.maximum(p + r, 1e-300), 0.0)
    return p, r, f


@dataclass
class EvalReport:
    """Per-class precision/recall per threshold plus MF-at-ODS summary."""

    thresholds: np.ndarray
    precision: np.ndarray  # (K, T)
    recall: np.ndarray  # (K, T)
    fscore: np.ndarray  # (K, T)
    mf: np.ndarray  # (K,), NaN when the class has no ground-truth edges
    best_threshold: np.ndarray  # (K,)
    valid: np.ndarray  # (K,) bool
    mean_mf: float

    def summary_text(self) -> str:
        lines = ["class  best_thr      MF"]
        for k in range(self.mf.size):
            if self.valid[k]:
                lines.append(
                    f"{k + 1:5d}  {self.best_threshold[k]:8.2f}  {self.mf[k]:6.4f}"
                )
            else:
                lines.append(f"{k + 1:5d}  {'-':>8}  {'n/a':>6}")
        lines.append(f"mean MF (ODS): {self.mean_mf:.4f}")
        return "\n".join(lines)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "threshold", "precision", "recall", "f", "mf"])
            for k in range(self.mf.size):
                mf = f"{self.mf[k]:.6f}" if self.valid[k] else "nan"
                for t in range(self.thresholds.size):
                    writer.writerow(
                        [
                            k + 1,
                            f"{self.thresholds[t]:.4f}",
                            f"{self.precision[k, t]:.6f}",
                            f"{self.recall[k, t]:.6f}",
                            f"{self.fscore[k, t]:.6f}",
                            mf,
                        ]
                    )


def _image_class_counts(args) -> np.ndarray:
    """tp/fp/fn for every class and threshold of one image: (K,T,3)."""
    prob, gt, tolerance, thresholds, thin = args
    k, _, _ = prob.shape
    t = len(thresholds)
    counts = np.zeros((k, t, 3), dtype=np.int64)
    for ki in range(k):
        gt_k = gt[ki].astype(bool)
        for ti, thr in enumerate(thresholds):
            binary = prob[ki] >= thr
            if thin:
                binary = thin_binary(binary)
            res = match_edges(binary, gt_k, tolerance)
            counts[ki, ti] = (res.tp, res.fp, res.fn)
    return counts


def resolve_workers(workers: Optional[int] = None) -> int:
    """Worker count for per-image parallelism, capped by DFF_THREADS."""
    if workers is None:
        workers = os.cpu_count() or 1
    cap = os.environ.get("DFF_THREADS")
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"DFF_THREADS must be an integer, got {cap!r}")
    return max(1, int(workers))


def mf_ods(
    predictions: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    tolerance: float = 0.02,
    thresholds: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
    thin: bool = False,
) -> EvalReport:
    """Maximum F-measure at optimal dataset scale.

    For every class and threshold the tp/fp/fn counts are accumulated over
    the whole dataset before computing F, so a single dataset-wide
    threshold per class is selected.  Classes with no ground-truth edges
    anywhere are excluded from the mean with a warning.  ``thin``
    skeletonizes each binarized prediction before matching (off by
    default).
    """
    if len(predictions) == 0:
        raise ConfigError("mf_ods needs at least one image")
    if len(predictions) != len(gts):
        raise DimensionError(
            f"{len(predictions)} predictions vs {len(gts)} ground truths"
        )
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    thresholds = np.asarray(sorted(float(t) for t in thresholds))
    if thresholds.size == 0 or thresholds.min() <= 0 or thresholds.max() >= 1:
        raise ConfigError("thresholds must lie strictly inside (0,1)")
    k = np.asarray(predictions[0]).shape[0]
    for p, g in zip(predictions, gts):
        if np.asarray(p).shape != np.asarray(g).shape or np.asarray(p).shape[0] != k:
            raise DimensionError("prediction/ground-truth shapes disagree")

    jobs = [
        (np.asarray(p, dtype=np.float64), np.asarray(g), tolerance, thresholds, thin)
        for p, g in zip(predictions, gts)
    ]
    nworkers = resolve_workers(workers)
    if nworkers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            per_image = list(pool.map(_image_class_counts, jobs, chunksize=1))
    else:
        per_image = [_image_class_counts(j) for j in jobs]
    totals = np.zeros((k, thresholds.size, 3), dtype=np.int64)
    for c in per_image:  # fixed image order: deterministic reduction
        totals += c

    tp, fp, fn = totals[..., 0], totals[..., 1], totals[..., 2]
    precision, recall, fscore = _f_measure(tp, fp, fn)
    valid = (tp + fn).max(axis=1) > 0  # any ground-truth edges for the class
    best_idx = fscore.argmax(axis=1)
    mf = np.where(valid, fscore[np.arange(k), best_idx], np.nan)
    best_thr = thresholds[best_idx]
    if not valid.all():
        missing = [str(i + 1) for i in np.flatnonzero(~valid)]
        warnings.warn(
            "classes with no ground-truth edges excluded from mean MF: "
            + ", ".join(missing),
            stacklevel=2,
        )
    if not valid.any():
        raise ConfigError("no class has any ground-truth edges")
    mean_mf = float(np.nanmean(np.where(valid, mf, np.nan)))
    return EvalReport(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        fscore=fscore,
        mf=mf,
        best_threshold=best_thr,
        valid=valid,
        mean_mf=mean_mf,
    )


def thin_binary(mask: np.ndarray) -> np.ndarray:
    """8-connected skeletonization of a binary edge map (optional extra)."""
    try:
        from skimage.morphology import skeletonize
    except ImportError as exc:  # pragma: no cover
        raise ConfigError(
            "thinning requires scikit-image; install the 'thin' extra"
        ) from exc
    return skeletonize(np.asarray(mask).astype(bool))


# ---------------------------------------------------------------------------
# prediction files: per-class 16-bit PGM maps or per-image .dft tensors
# ---------------------------------------------------------------------------

def load_prediction(
    directory: Union[str, Path], stem: str, num_classes: int
) -> np.ndarray:
    """Load one image's per-class probability maps from a dump directory.

    Accepts either ``<stem>_<class>.pgm`` (16-bit, value/65535) for each
    class or a single ``<stem>.dft`` tensor of shape (K,H,W).
    """
    from .dft import read_dft
    from .pnm import read_prob_pgm

    directory = Path(directory)
    dft_path = directory / f"{stem}.dft"
    if dft_path.is_file():
        arr = read_dft(dft_path)
        if arr.ndim != 3 or arr.shape[0] != num_classes:
            raise DimensionError(
                f"{dft_path}: expected ({num_classes},H,W), got {arr.shape}"
            )
        return arr
    maps = []
    for k in range(1, num_classes + 1):
        pgm_path = directory / f"{stem}_{k}.pgm"
        if not pgm_path.is_file():
            raise FileNotFoundError(f"missing prediction file {pgm_path}")
        maps.append(read_prob_pgm(pgm_path))
    return np.stack(maps)
