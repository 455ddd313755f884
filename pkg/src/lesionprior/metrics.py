"""Segmentation metrics: Dice, Hausdorff distances, and case reports.

Distances are measured in millimetres between boundary-voxel centers
(6-neighborhood surface, the volume border counting as background) through
the exact Euclidean distance transform from the kernel backend. Empty
masks follow the usual evaluation conventions: Dice 1.0 when both sides
are empty, 0.0 when exactly one is, and an infinite-distance sentinel for
any empty side of a distance metric.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .volume import LabelVolume, nearest_rank, require_same_geometry

REGION_LABELS = {
    "ET": frozenset({4}),
    "TC": frozenset({1, 4}),
    "WT": frozenset({1, 2, 4}),
}
REGION_ORDER = ("ET", "WT", "TC")


def region_masks(vol: LabelVolume | np.ndarray) -> dict[str, np.ndarray]:
    """Binary mask per evaluation region (ET, TC, WT) from BraTS codes."""
    data = vol.data if isinstance(vol, LabelVolume) else np.asarray(vol)
    present = set(np.unique(data).tolist())
    allowed = {0, 1, 2, 4}
    if not present <= allowed:
        raise ValueError(f"labels {sorted(present - allowed)} are not "
                         f"BraTS codes {sorted(allowed)}")
    return {name: np.isin(data, list(labels))
            for name, labels in REGION_LABELS.items()}


def dice(gt: np.ndarray, pred: np.ndarray) -> float:
    """2|G n P| / (|G| + |P|); both empty -> 1.0, one empty -> 0.0."""
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    n_gt = int(gt.sum())
    n_pred = int(pred.sum())
    if n_gt == 0 and n_pred == 0:
        return 1.0
    overlap = int(np.logical_and(gt, pred).sum())
    return 2.0 * overlap / (n_gt + n_pred)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels that are set and have a cleared 6-neighbor (border counts as 0)."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        shifted = np.zeros_like(mask)
        shifted[tuple(lo)] = mask[tuple(hi)]  # neighbor at +1
        interior &= shifted
        shifted = np.zeros_like(mask)
        shifted[tuple(hi)] = mask[tuple(lo)]  # neighbor at -1
        interior &= shifted
    return mask & ~interior


def _directed_distances(from_mask, to_mask, spacing) -> np.ndarray:
    """Distance (mm) from every boundary voxel of one set to the other's surface."""
    d2 = kernels.edt_sq(boundary(to_mask), spacing)
    return np.sqrt(d2[boundary(from_mask)])


def hausdorff(x: np.ndarray, y: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance in mm; inf when either mask is empty."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if not x.any() or not y.any():
        return math.inf
    dxy = _directed_distances(x, y, spacing)
    dyx = _directed_distances(y, x, spacing)
    return float(max(dxy.max(), dyx.max()))


def hausdorff95(x: np.ndarray, y: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile (nearest-rank) distances."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if not x.any() or not y.any():
        return math.inf
    dxy = _directed_distances(x, y, spacing)
    dyx = _directed_distances(y, x, spacing)
    return float(max(nearest_rank(dxy, 95), nearest_rank(dyx, 95)))


@dataclass
class CaseReport:
    case_id: str
    dsc: dict[str, float]
    h95: dict[str, float]
    hausdorff: dict[str, float]


def evaluate_case(gt: LabelVolume, pred: LabelVolume,
                  case_id: str = "case") -> CaseReport:
    """Per-region Dice, H95, and full Hausdorff for one prediction."""
    require_same_geometry(gt, pred)
    gt_regions = region_masks(gt)
    pred_regions = region_masks(pred)
    dsc = {}
    h95 = {}
    hd = {}
    for name in REGION_ORDER:
        g = gt_regions[name]
        p = pred_regions[name]
        dsc[name] = dice(g, p)
        h95[name] = hausdorff95(g, p, gt.spacing)
        hd[name] = hausdorff(g, p, gt.spacing)
    return CaseReport(case_id, dsc, h95, hd)


_CSV_HEADER = ["case_id", "dsc_et", "dsc_wt", "dsc_tc",
               "h95_et", "h95_wt", "h95_tc"]


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6g}"


def write_report_csv(reports: Sequence[CaseReport], path) -> None:
    """Per-case rows plus a final mean row (mean over finite entries)."""
    rows = []
    for r in reports:
        rows.append([r.case_id] + [r.dsc[n] for n in REGION_ORDER]
                    + [r.h95[n] for n in REGION_ORDER])
    means = []
    for col in range(1, 7):
        finite = [row[col] for row in rows if math.isfinite(row[col])]
        means.append(float(np.mean(finite)) if finite else math.inf)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for row in rows:
            writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
        writer.writerow(["mean"] + [_fmt(v) for v in means])
