"""Lesion-prior construction: cohort heatmaps and the 10-label VOI map.

A heatmap counts, per atlas voxel, how many subjects show a given lesion
type there. The VOI map thresholds the three heatmaps at cohort
percentiles and assigns each voxel the first matching label of a fixed
priority cascade (enhancing tumor outranks necrosis outranks edema, and
higher percentile bands outrank lower ones).
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .volume import (
    EmptySupportError,
    LabelVolume,
    percentile_nonzero,
    require_same_geometry,
)

# BraTS integer coding of the ground-truth lesion classes
NCR_LABEL = 1
ED_LABEL = 2
ET_LABEL = 4

DEFAULT_PERCENTILES = (50.0, 65.0, 80.0)

VOI_ALPHABET = frozenset(range(10))


class ThresholdTriple(NamedTuple):
    h1: float
    h2: float
    h3: float


def _binary_like(ref: LabelVolume, mask: np.ndarray) -> LabelVolume:
    return LabelVolume(mask.astype(np.uint8), ref.spacing, ref.affine,
                       alphabet={0, 1})


def split_lesion_mask(gt: LabelVolume) -> tuple[LabelVolume, LabelVolume, LabelVolume]:
    """Split a BraTS ground-truth mask into (edema, necrosis, enhancing) binaries."""
    present = set(np.unique(gt.data).tolist())
    allowed = {0, NCR_LABEL, ED_LABEL, ET_LABEL}
    if not present <= allowed:
        raise ValueError(f"unexpected labels {sorted(present - allowed)}; "
                         f"expected subset of {sorted(allowed)}")
    ed = _binary_like(gt, gt.data == ED_LABEL)
    ncr = _binary_like(gt, gt.data == NCR_LABEL)
    et = _binary_like(gt, gt.data == ET_LABEL)
    return ed, ncr, et


def accumulate_heatmaps(
    masks: Sequence[tuple[LabelVolume, LabelVolume, LabelVolume]],
) -> tuple[LabelVolume, LabelVolume, LabelVolume]:
    """Element-wise sum of per-subject (ed, ncr, et) binary masks."""
    if not masks:
        raise ValueError("cannot build heatmaps from an empty subject list")
    ref = masks[0][0]
    sums = [np.zeros(ref.shape, dtype=np.int32) for _ in range(3)]
    for triple in masks:
        for i, vol in enumerate(triple):
            require_same_geometry(ref, vol)
            sums[i] += vol.data.astype(np.int32)
    return tuple(LabelVolume(s, ref.spacing, ref.affine) for s in sums)


def compute_thresholds(
    heatmap: LabelVolume,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
) -> ThresholdTriple:
    """Percentile thresholds (h1, h2, h3) over the non-zero heatmap voxels."""
    a, b, c = (float(p) for p in percentiles)
    if not (0 < a <= b <= c <= 100):
        raise ValueError(f"percentiles must satisfy 0 < a <= b <= c <= 100, "
                         f"got {percentiles}")
    try:
        return ThresholdTriple(
            percentile_nonzero(heatmap, a),
            percentile_nonzero(heatmap, b),
            percentile_nonzero(heatmap, c),
        )
    except EmptySupportError as exc:
        raise EmptySupportError("empty heatmap: no subject contributed a "
                                "voxel of this lesion type") from exc


def build_voi(
    h_ed: LabelVolume,
    h_ncr: LabelVolume,
    h_et: LabelVolume,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    skip_empty: bool = False,
) -> LabelVolume:
    """Build the 10-label VOI map from the three lesion heatmaps.

    Per voxel the first matching rule wins, comparing with >=:
    ET band 3 -> 9, NCR band 3 -> 8, ED band 3 -> 7, then the same order
    for band 2 (6, 5, 4) and band 1 (3, 2, 1), else 0.

    With ``skip_empty`` a heatmap without support drops out of the cascade
    instead of raising (useful for small synthetic cohorts).
    """
    require_same_geometry(h_ed, h_ncr, h_et)

    def thresholds(h):
        try:
            return compute_thresholds(h, percentiles)
        except EmptySupportError:
            if skip_empty:
                return ThresholdTriple(np.inf, np.inf, np.inf)
            raise

    t_ed, t_ncr, t_et = thresholds(h_ed), thresholds(h_ncr), thresholds(h_et)

    ed, ncr, et = h_ed.data, h_ncr.data, h_et.data
    conditions = [
        et >= t_et.h3, ncr >= t_ncr.h3, ed >= t_ed.h3,
        et >= t_et.h2, ncr >= t_ncr.h2, ed >= t_ed.h2,
        et >= t_et.h1, ncr >= t_ncr.h1, ed >= t_ed.h1,
    ]
    labels = np.select(conditions, [9, 8, 7, 6, 5, 4, 3, 2, 1], default=0)
    return LabelVolume(labels.astype(np.uint8), h_ed.spacing, h_ed.affine,
                       alphabet=VOI_ALPHABET)


def split_voi_channels(voi: LabelVolume) -> list[LabelVolume]:
    """Indicator channels for VOI labels 1..9 (label 0 yields no channel)."""
    present = set(np.unique(voi.data).tolist())
    if not present <= VOI_ALPHABET:
        raise ValueError(f"VOI labels {sorted(present - VOI_ALPHABET)} outside 0..9")
    return [_binary_like(voi, voi.data == lab) for lab in range(1, 10)]


def label_distribution(
    voi: LabelVolume,
    h_ed: LabelVolume,
    h_ncr: LabelVolume,
    h_et: LabelVolume,
    n_subjects: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Lesion probability per VOI label.

    Returns ``(table, voxels)`` where ``table[label, t]`` is the mean
    per-subject lesion frequency of type t (columns ed, ncr, et) over the
    voxels carrying that VOI label, and ``voxels[label]`` is the size of
    the label class. Labels with no voxels get NaN rows.
    """
    require_same_geometry(voi, h_ed, h_ncr, h_et)
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    table = np.full((10, 3), np.nan)
    voxels = np.zeros(10, dtype=np.int64)
    flat_v = voi.data.ravel()
    for lab in range(10):
        sel = flat_v == lab
        voxels[lab] = int(sel.sum())
        if voxels[lab] == 0:
            continue
        for t, h in enumerate((h_ed, h_ncr, h_et)):
            total = float(h.data.ravel()[sel].sum(dtype=np.float64))
            table[lab, t] = total / (n_subjects * voxels[lab])
    return table, voxels


def write_distribution_csv(table: np.ndarray, voxels: np.ndarray, path) -> None:
    """CSV rows ``label,ed,ncr,et,voxels``; empty label classes export NaN."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "ed", "ncr", "et", "voxels"])
        for lab in range(10):
            row = [lab] + [f"{v:.10g}" for v in table[lab]] + [int(voxels[lab])]
            writer.writerow(row)
