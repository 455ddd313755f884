"""Intensity normalization and assembly of the fused network input.

MR modalities are clipped to the [0.2, 99.8] nearest-rank percentiles of
their non-zero voxels, then z-scored over the brain mask (population
standard deviation). The fused input stacks the four modalities with the
nine binary VOI channels in a fixed order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nifti import read_nifti, write_nifti
from .volume import (
    EmptySupportError,
    LabelVolume,
    ScalarVolume,
    percentile_nonzero,
    require_same_geometry,
)

MODALITY_NAMES = ("t1", "t1c", "t2", "flair")
VOI_CHANNEL_NAMES = tuple(f"voi{i}" for i in range(1, 10))
FUSED_CHANNEL_NAMES = MODALITY_NAMES + VOI_CHANNEL_NAMES

CLIP_PERCENTILES = (0.2, 99.8)
_SIGMA_FLOOR = 1e-8


@dataclass
class MultiChannelVolume:
    """Ordered stack of aligned channels: data (C, dx, dy, dz) + names."""

    data: np.ndarray
    names: tuple[str, ...]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"expected (C, dx, dy, dz) data, got {self.data.shape}")
        self.names = tuple(self.names)
        if len(self.names) != self.data.shape[0]:
            raise ValueError(f"{len(self.names)} names for "
                             f"{self.data.shape[0]} channels")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.names.index(name)]


def clip_outliers(vol: ScalarVolume,
                  percentiles: Sequence[float] = CLIP_PERCENTILES) -> ScalarVolume:
    """Clamp non-zero voxels into the given percentile band; zeros stay zero."""
    lo = percentile_nonzero(vol, percentiles[0])
    hi = percentile_nonzero(vol, percentiles[1])
    data = vol.data
    clipped = np.where(data != 0, np.clip(data, lo, hi), data)
    return ScalarVolume(clipped.astype(data.dtype, copy=False),
                        vol.spacing, vol.affine)


def brain_mask(modalities: Sequence[ScalarVolume]) -> LabelVolume:
    """Brain = union of the non-zero supports of all modalities."""
    if not modalities:
        raise ValueError("need at least one modality")
    require_same_geometry(*modalities)
    ref = modalities[0]
    mask = np.zeros(ref.shape, dtype=bool)
    for m in modalities:
        mask |= m.data != 0
    return LabelVolume(mask.astype(np.uint8), ref.spacing, ref.affine,
                       alphabet={0, 1})


def zscore_normalize(vol: ScalarVolume, mask: LabelVolume) -> ScalarVolume:
    """(x - mean) / std over masked voxels; voxels outside the mask become 0.

    Uses the population standard deviation. A flat image (std below 1e-8)
    normalizes to all zeros with a warning instead of dividing by ~0.
    """
    require_same_geometry(vol, mask)
    inside = mask.data != 0
    n = int(inside.sum())
    if n < 2:
        raise ValueError(f"brain mask needs >= 2 voxels, has {n}")
    values = vol.data[inside].astype(np.float64)
    mu = values.mean()
    sigma = values.std()  # population (divide by N)
    out = np.zeros(vol.shape, dtype=np.float64)
    if sigma < _SIGMA_FLOOR:
        warnings.warn("flat image: standard deviation ~ 0, output zeroed",
                      stacklevel=2)
    else:
        out[inside] = (values - mu) / sigma
    return ScalarVolume(out.astype(vol.data.dtype, copy=False),
                        vol.spacing, vol.affine)


def fuse_channels(
    modalities: Sequence[ScalarVolume],
    voi_channels: Sequence[LabelVolume] | None = None,
) -> MultiChannelVolume:
    """Stack 4 modalities (+ 9 binary VOI channels) in the canonical order.

    ``voi_channels=None`` builds the 4-channel baseline input.
    """
    if len(modalities) != len(MODALITY_NAMES):
        raise ValueError(f"expected {len(MODALITY_NAMES)} modalities "
                         f"({', '.join(MODALITY_NAMES)}), got {len(modalities)}")
    vols = list(modalities)
    names = MODALITY_NAMES
    if voi_channels is not None:
        if len(voi_channels) != len(VOI_CHANNEL_NAMES):
            raise ValueError(f"expected {len(VOI_CHANNEL_NAMES)} VOI channels, "
                             f"got {len(voi_channels)}")
        for c in voi_channels:
            if c.data.max(initial=0) > 1:
                raise ValueError("VOI channels must be binary")
        vols += list(voi_channels)
        names = FUSED_CHANNEL_NAMES
    require_same_geometry(*vols)
    ref = modalities[0]
    stack = np.stack([v.data.astype(np.float32) for v in vols])
    return MultiChannelVolume(stack, names, ref.spacing, ref.affine)


def preprocess_modalities(
    modalities: Sequence[ScalarVolume],
) -> tuple[list[ScalarVolume], LabelVolume]:
    """Clip then z-score every modality against the shared brain mask."""
    mask = brain_mask(modalities)
    done = [zscore_normalize(clip_outliers(m), mask) for m in modalities]
    return done, mask


# ---------------------------------------------------------------------------
# On-disk layout of a fused case: one NIfTI per channel + channels.json
# ---------------------------------------------------------------------------

def save_fused(fused: MultiChannelVolume, case_dir, case_id: str,
               gt_path=None) -> Path:
    """Write channels as NIfTI files plus a channels.json manifest."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(fused.names):
        fname = f"ch{i:02d}_{name}.nii.gz"
        vol = ScalarVolume(fused.data[i], fused.spacing, fused.affine)
        write_nifti(vol, case_dir / fname)
        entries.append({"name": name, "path": fname})
    manifest = {"case_id": case_id, "channels": entries}
    if gt_path is not None:
        rel = Path(gt_path).resolve()
        manifest["gt"] = str(rel)
    out = case_dir / "channels.json"
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_fused(manifest_path) -> tuple[MultiChannelVolume, str, Path | None]:
    """Load a fused case; returns (volume, case_id, gt_path or None)."""
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    vols = []
    names = []
    for entry in spec["channels"]:
        vol = read_nifti(manifest_path.parent / entry["path"], kind="scalar")
        vols.append(vol)
        names.append(entry["name"])
    require_same_geometry(*vols)
    stack = np.stack([v.data.astype(np.float32) for v in vols])
    fused = MultiChannelVolume(stack, tuple(names),
                               vols[0].spacing, vols[0].affine)
    gt = spec.get("gt")
    return fused, spec["case_id"], Path(gt) if gt else None
