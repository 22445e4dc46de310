"""Segmentation quality measures: Dice overlap and 95th-percentile Hausdorff.

Distances are in pixel units by default; `spacing` scales coordinates per
axis for calibrated data. Empty-mask conventions: both masks empty means a
perfect score (dice 1.0, hd95 0.0); exactly one empty yields the image
diagonal as a bounded worst-case sentinel.

`dice_bruteforce` and `hd95_bruteforce` recompute both measures with literal
per-pixel loops and an explicit order-statistic interpolation. They exist to
cross-check the vectorized implementations and are intentionally slow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError


@dataclass
class MetricReport:
    """Per-class and mean scores for one scan or an aggregated set."""
    per_class: dict[int, tuple[float, float]]
    mean_dice: float
    mean_hd95: float
    cases: int
    gt_classes: tuple[int, ...] = field(default_factory=tuple)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"metric inputs differ: {pred.shape} vs {gt.shape}")
    if pred.ndim not in (2, 3):
        raise ShapeError(f"metric inputs must be 2-D or 3-D, got {pred.ndim}-D")


def _spacing_vector(spacing, ndim: int) -> np.ndarray:
    vec = np.asarray(spacing, dtype=np.float64)
    if vec.ndim == 0:
        vec = np.full(ndim, float(vec))
    if vec.shape != (ndim,) or np.any(vec <= 0):
        raise ShapeError(f"spacing must be a positive scalar or {ndim}-vector")
    return vec


def dice(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_pair(pred, gt)
    p = pred == c
    g = gt == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def _boundary_coords(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels on the array border or next to background.

    Uses the 4-neighborhood in 2-D and the 6-neighborhood in 3-D.
    """
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask, dtype=bool)
    center = tuple(slice(1, -1) for _ in range(mask.ndim))
    for axis in range(mask.ndim):
        for step in (0, 2):
            sl = list(center)
            sl[axis] = slice(step, padded.shape[axis] - 2 + step)
            interior &= padded[tuple(sl)]
    return np.argwhere(mask & ~interior)


def _diagonal(shape: tuple[int, ...], spacing: np.ndarray) -> float:
    return float(np.sqrt(sum(((d - 1) * s) ** 2 for d, s in zip(shape, spacing))))


def hd95(pred: np.ndarray, gt: np.ndarray, c: int, spacing=1.0) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_pair(pred, gt)
    vec = _spacing_vector(spacing, pred.ndim)
    p = pred == c
    g = gt == c
    p_any = bool(p.any())
    g_any = bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return _diagonal(pred.shape, vec)
    bp = _boundary_coords(p).astype(np.float64) * vec
    bg = _boundary_coords(g).astype(np.float64) * vec
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    pooled = np.concatenate([d_pg, d_gp])
    return float(np.percentile(pooled, 95))


def dice_bruteforce(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_pair(pred, gt)
    inter = 0
    p_count = 0
    g_count = 0
    for idx in np.ndindex(pred.shape):
        in_p = pred[idx] == c
        in_g = gt[idx] == c
        inter += in_p and in_g
        p_count += in_p
        g_count += in_g
    if p_count + g_count == 0:
        return 1.0
    return 2.0 * inter / (p_count + g_count)


def _boundary_loop(mask: np.ndarray) -> list[tuple[int, ...]]:
    coords = []
    shape = mask.shape
    for idx in np.ndindex(shape):
        if not mask[idx]:
            continue
        edge = False
        for axis in range(mask.ndim):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if nb[axis] < 0 or nb[axis] >= shape[axis]:
                    edge = True
                elif not mask[tuple(nb)]:
                    edge = True
        if edge:
            coords.append(idx)
    return coords


def _percentile_linear(values: list[float], q: float) -> float:
    ordered = sorted(values)
    pos = (len(ordered) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = math.ceil(pos)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


def hd95_bruteforce(pred: np.ndarray, gt: np.ndarray, c: int, spacing=1.0) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_pair(pred, gt)
    vec = _spacing_vector(spacing, pred.ndim)
    p = pred == c
    g = gt == c
    if not p.any() and not g.any():
        return 0.0
    if p.any() != g.any():
        return _diagonal(pred.shape, vec)
    bp = _boundary_loop(p)
    bg = _boundary_loop(g)

    def scaled(idx):
        return [x * s for x, s in zip(idx, vec)]

    pooled = []
    for a in bp:
        pooled.append(min(math.dist(scaled(a), scaled(b)) for b in bg))
    for b in bg:
        pooled.append(min(math.dist(scaled(b), scaled(a)) for a in bp))
    return _percentile_linear(pooled, 95.0)


def evaluate_volume(pred_slices, gt_slices, num_classes: int,
                    spacing=1.0) -> MetricReport:
    """Stack one scan's slices and score every foreground class in 3-D.

    Classes absent from both the prediction and the ground truth count as
    perfect (1.0, 0.0). The scan means cover only classes present in the
    ground truth.
    """
    if len(pred_slices) != len(gt_slices) or not pred_slices:
        raise ShapeError(
            f"slice counts differ or empty: {len(pred_slices)} vs {len(gt_slices)}")
    dims = {np.asarray(s).shape for s in pred_slices}
    dims |= {np.asarray(s).shape for s in gt_slices}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent slice dims: {sorted(dims)}")
    pred = np.stack([np.asarray(s) for s in pred_slices])
    gt = np.stack([np.asarray(s) for s in gt_slices])

    per_class: dict[int, tuple[float, float]] = {}
    gt_present = []
    for c in range(1, num_classes):
        in_gt = bool((gt == c).any())
        if in_gt:
            gt_present.append(c)
        if not in_gt and not bool((pred == c).any()):
            per_class[c] = (1.0, 0.0)
        else:
            per_class[c] = (dice(pred, gt, c), hd95(pred, gt, c, spacing))
    return _summarize(per_class, gt_present, cases=1)


def _summarize(per_class, gt_present, cases: int) -> MetricReport:
    if gt_present:
        mean_dice = float(np.mean([per_class[c][0] for c in gt_present]))
        mean_hd95 = float(np.mean([per_class[c][1] for c in gt_present]))
    else:
        mean_dice, mean_hd95 = 1.0, 0.0
    return MetricReport(per_class=per_class, mean_dice=mean_dice,
                        mean_hd95=mean_hd95, cases=cases,
                        gt_classes=tuple(gt_present))


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    """Combine per-scan reports: mean over scans per class, then over classes.

    The final means cover foreground classes present in at least one scan's
    ground truth.
    """
    if not reports:
        raise ShapeError("nothing to aggregate")
    class_ids = sorted({c for r in reports for c in r.per_class})
    per_class = {}
    for c in class_ids:
        ds = [r.per_class[c][0] for r in reports]
        hs = [r.per_class[c][1] for r in reports]
        per_class[c] = (float(np.mean(ds)), float(np.mean(hs)))
    union = sorted({c for r in reports for c in r.gt_classes})
    return _summarize(per_class, union, cases=sum(r.cases for r in reports))


def write_report_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "dice", "hd95"])
        for c in sorted(report.per_class):
            d, h = report.per_class[c]
            writer.writerow([c, f"{d:.6f}", f"{h:.6f}"])
        writer.writerow(["mean", f"{report.mean_dice:.6f}",
                         f"{report.mean_hd95:.6f}"])
