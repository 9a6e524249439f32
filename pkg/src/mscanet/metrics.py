"""Pixel- and target-level IRSTD metrics: IoU, nIoU, Pd, Fa and ROC sweeps.

Masks are numpy arrays; anything non-zero counts as positive.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError

DEFAULT_THRESHOLD = 0.5
DEFAULT_DIST_PX = 3.0
ROC_HEADER = ("threshold", "fa", "pd")
REPORT_KEYS = ("miou", "niou", "pd", "fa_e6", "threshold", "n_images")

_EIGHT = np.ones((3, 3), dtype=bool)


def _check_threshold(threshold: float) -> float:
    threshold = float(threshold)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    return threshold


def binarize(prob: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """``prob > threshold`` as a bool array (strict inequality)."""
    threshold = _check_threshold(threshold)
    return np.asarray(prob) > threshold


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def confusion_counts(pred, gt) -> tuple[int, int, int]:
    """``(TP, T, P)`` pixel counts for one image."""
    pred, gt = _pair(pred, gt)
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(gt)), int(np.count_nonzero(pred))


def iou(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Dataset-pooled IoU: sum of intersections over sum of unions.

    Returns 1.0 when every prediction and ground truth is empty.
    """
    inter = union = 0
    for pred, gt in pairs:
        tp, t, p = confusion_counts(pred, gt)
        inter += tp
        union += t + p - tp
    return 1.0 if union == 0 else inter / union


def niou(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Per-image IoU averaged over images; an image with empty union scores 1.0."""
    if len(pairs) == 0:
        raise ValueError("niou needs at least one image")
    total = 0.0
    for pred, gt in pairs:
        tp, t, p = confusion_counts(pred, gt)
        union = t + p - tp
        total += 1.0 if union == 0 else tp / union
    return total / len(pairs)


class MatchResult(NamedTuple):
    matched: int
    gt_targets: int
    false_pixels: int


def components(mask: np.ndarray) -> tuple[np.ndarray, int, np.ndarray]:
    """8-connected labelling. Returns ``(labels, count, centroids)`` with centroids ``(count, 2)`` in (row, col)."""
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return labels, 0, np.zeros((0, 2))
    cents = np.asarray(ndimage.center_of_mass(mask, labels, range(1, n + 1)), dtype=float)
    return labels, n, cents.reshape(n, 2)


def match_targets(pred, gt, dist_px: float = DEFAULT_DIST_PX) -> MatchResult:
    """Match predicted components to ground-truth targets by centroid distance.

    A (gt, pred) pair is a candidate when their centroids are within
    ``dist_px`` (Euclidean, inclusive). Candidates are accepted greedily from
    the closest pair outward, each component matching at most once. Pixels of
    predicted components left unmatched count as false alarms.
    """
    if not dist_px > 0:
        raise ValueError(f"dist_px must be positive, got {dist_px}")
    pred, gt = _pair(pred, gt)
    _, n_gt, gt_c = components(gt)
    pred_labels, n_pred, pred_c = components(pred)
    if n_pred == 0 or n_gt == 0:
        return MatchResult(0, n_gt, int(np.count_nonzero(pred)))

    dist = np.linalg.norm(gt_c[:, None, :] - pred_c[None, :, :], axis=-1)
    gi, pj = np.nonzero(dist <= dist_px)
    order = np.lexsort((pj, gi, dist[gi, pj]))
    gt_used = np.zeros(n_gt, dtype=bool)
    pred_used = np.zeros(n_pred, dtype=bool)
    for g, p in zip(gi[order], pj[order]):
        if not gt_used[g] and not pred_used[p]:
            gt_used[g] = pred_used[p] = True

    sizes = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)[1:]
    false_pixels = int(sizes[~pred_used].sum())
    return MatchResult(int(gt_used.sum()), n_gt, false_pixels)


def pd(per_image: Sequence[MatchResult]) -> float:
    """Fraction of ground-truth targets that were matched, pooled over images."""
    n_all = sum(r.gt_targets for r in per_image)
    if n_all == 0:
        raise UndefinedMetricError("Pd is undefined: no ground-truth targets in the dataset")
    return sum(r.matched for r in per_image) / n_all


def _pixels(size) -> int:
    if isinstance(size, (int, np.integer)):
        return int(size)
    return int(math.prod(size))


def fa(per_image: Sequence[MatchResult], image_sizes: Sequence) -> float:
    """False-alarm pixels over all pixels (raw ratio; multiply by 1e6 for the usual report).

    ``image_sizes`` holds pixel counts or ``(H, W)`` tuples, one per image.
    """
    if len(per_image) != len(image_sizes):
        raise ValueError(f"{len(per_image)} match results but {len(image_sizes)} image sizes")
    p_all = sum(_pixels(s) for s in image_sizes)
    if p_all <= 0:
        raise ValueError("fa needs a positive total pixel count")
    return sum(r.false_pixels for r in per_image) / p_all


@dataclass
class MetricReport:
    miou: float
    niou: float
    pd: float | None
    fa: float
    threshold: float
    n_images: int
    tp: list[int] = field(default_factory=list)
    t: list[int] = field(default_factory=list)
    p: list[int] = field(default_factory=list)
    n_pred: int = 0
    n_all: int = 0
    n_false: int = 0
    p_all: int = 0

    @property
    def fa_e6(self) -> float:
        return self.fa * 1e6

    def to_dict(self) -> dict:
        """The stable ``report.json`` schema."""
        return {
            "miou": self.miou,
            "niou": self.niou,
            "pd": self.pd,
            "fa_e6": self.fa_e6,
            "threshold": self.threshold,
            "n_images": self.n_images,
        }

    def summary(self) -> str:
        pd_txt = "n/a" if self.pd is None else f"{100 * self.pd:.2f}"
        return (
            f"mIoU {100 * self.miou:.2f} | nIoU {100 * self.niou:.2f} | "
            f"Pd {pd_txt} | Fa(1e-6) {self.fa_e6:.2f}"
        )


def compute_report(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    threshold: float = DEFAULT_THRESHOLD,
    dist_px: float = DEFAULT_DIST_PX,
    binarized: bool = False,
) -> MetricReport:
    """All four metrics plus raw counts.

    ``preds`` are probability maps unless ``binarized`` is set. Pd is ``None``
    when the dataset holds no targets.
    """
    threshold = _check_threshold(threshold)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground-truth masks")
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    masks = [np.asarray(p).astype(bool) if binarized else binarize(p, threshold) for p in preds]
    gts = [np.asarray(g).astype(bool) for g in gts]
    pairs = list(zip(masks, gts))
    counts = [confusion_counts(m, g) for m, g in pairs]
    matches = [match_targets(m, g, dist_px) for m, g in pairs]
    sizes = [g.size for g in gts]
    try:
        pd_value = pd(matches)
    except UndefinedMetricError:
        pd_value = None
    return MetricReport(
        miou=iou(pairs),
        niou=niou(pairs),
        pd=pd_value,
        fa=fa(matches, sizes),
        threshold=threshold,
        n_images=len(pairs),
        tp=[c[0] for c in counts],
        t=[c[1] for c in counts],
        p=[c[2] for c in counts],
        n_pred=sum(m.matched for m in matches),
        n_all=sum(m.gt_targets for m in matches),
        n_false=sum(m.false_pixels for m in matches),
        p_all=sum(sizes),
    )


def roc_curve(
    probs: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    thresholds: Sequence[float],
    dist_px: float = DEFAULT_DIST_PX,
) -> list[tuple[float, float, float]]:
    """``(threshold, fa, pd)`` for each threshold, in threshold order."""
    thresholds = [_check_threshold(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    if len(probs) != len(gts):
        raise ValueError(f"{len(probs)} probability maps but {len(gts)} ground-truth masks")
    sizes = [np.asarray(g).size for g in gts]
    rows = []
    for t in thresholds:
        matches = [match_targets(binarize(p, t), g, dist_px) for p, g in zip(probs, gts)]
        rows.append((t, fa(matches, sizes), pd(matches)))
    return rows


def even_thresholds(steps: int) -> list[float]:
    """``steps`` evenly spaced thresholds strictly inside (0, 1)."""
    if steps < 2:
        raise ValueError(f"need at least 2 thresholds, got {steps}")
    return [(i + 1) / (steps + 1) for i in range(steps)]


def write_roc_csv(path: str | Path, rows: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROC_HEADER)
        for t, f, d in rows:
            w.writerow([repr(float(t)), repr(float(f)), repr(float(d))])
