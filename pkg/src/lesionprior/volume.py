"""Volume containers, nearest-rank percentiles, and affine resampling.

Geometry model: a volume is a 3-D grid of values plus per-axis voxel
spacing in millimetres and a 4x4 voxel-index -> world-mm affine. All
functions here are pure; volumes are treated as immutable, shareable
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Shapes, spacings, or affines of two volumes do not agree."""


class EmptySupportError(ValueError):
    """An operation needed non-zero voxels but the volume has none."""


class AffineConventionError(ValueError):
    """An affine matrix violates the required structure."""


def as_affine(mat) -> np.ndarray:
    """Validate and return a 4x4 voxel->world affine as float64.

    The last row must be (0, 0, 0, 1) and the upper-left 3x3 block must be
    invertible.
    """
    a = np.asarray(mat, dtype=np.float64)
    if a.shape != (4, 4):
        raise AffineConventionError(f"affine must be 4x4, got {a.shape}")
    if not np.allclose(a[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
        raise AffineConventionError(f"affine last row must be (0,0,0,1), got {a[3]}")
    if abs(np.linalg.det(a[:3, :3])) < 1e-12:
        raise AffineConventionError("affine upper-left 3x3 block is singular")
    return a


def _check_spacing(spacing) -> tuple[float, float, float]:
    s = tuple(float(v) for v in spacing)
    if len(s) != 3 or any(v <= 0 for v in s):
        raise ValueError(f"spacing must be 3 positive values, got {spacing}")
    return s


def _default_affine(spacing) -> np.ndarray:
    a = np.eye(4)
    a[0, 0], a[1, 1], a[2, 2] = spacing
    return a


@dataclass
class ScalarVolume:
    """3-D grid of real intensities with voxel spacing and world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"expected a 3-D grid, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.spacing = _check_spacing(self.spacing)
        if self.affine is None:
            self.affine = _default_affine(self.spacing)
        self.affine = as_affine(self.affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """3-D grid of small non-negative integer labels (masks, VOI maps).

    ``alphabet``, when given, is the set of admissible label values and is
    enforced at construction time.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    alphabet: frozenset[int] | None = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"expected a 3-D grid, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise TypeError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size and self.data.min() < 0:
            raise ValueError("label data must be non-negative")
        if self.alphabet is not None:
            self.alphabet = frozenset(int(v) for v in self.alphabet)
            present = set(np.unique(self.data).tolist())
            foreign = present - self.alphabet
            if foreign:
                raise ValueError(f"labels {sorted(foreign)} outside alphabet "
                                 f"{sorted(self.alphabet)}")
        self.spacing = _check_spacing(self.spacing)
        if self.affine is None:
            self.affine = _default_affine(self.spacing)
        self.affine = as_affine(self.affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


Volume = ScalarVolume | LabelVolume


def same_geometry(a: Volume, b: Volume, atol: float = 1e-5) -> bool:
    """True when two volumes share shape, spacing, and affine."""
    return (
        a.shape == b.shape
        and np.allclose(a.spacing, b.spacing, atol=atol)
        and np.allclose(a.affine, b.affine, atol=atol)
    )


def require_same_geometry(*vols: Volume) -> None:
    ref = vols[0]
    for v in vols[1:]:
        if not same_geometry(ref, v):
            raise GeometryError(
                f"volume geometry mismatch: {ref.shape}/{ref.spacing} vs "
                f"{v.shape}/{v.spacing}")


def nearest_rank(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: sorted ascending, 1-based index ceil(p/100*n)."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    v = np.sort(np.asarray(values), axis=None)
    n = v.size
    if n == 0:
        raise EmptySupportError("percentile of an empty value set")
    idx = math.ceil(p / 100.0 * n)
    return float(v[max(idx, 1) - 1])


def percentile_nonzero(vol: Volume | np.ndarray, p: float) -> float:
    """Nearest-rank percentile over the strictly positive voxel values.

    Raises EmptySupportError when the volume has no positive voxel; the
    caller decides the fallback.
    """
    data = vol.data if isinstance(vol, (ScalarVolume, LabelVolume)) else np.asarray(vol)
    pos = data[data > 0]
    if pos.size == 0:
        raise EmptySupportError("volume has empty support (no positive voxels)")
    return nearest_rank(pos, p)


# ---------------------------------------------------------------------------
# Affine file I/O and conversion to voxel-to-voxel maps
# ---------------------------------------------------------------------------

def load_affine_file(path) -> np.ndarray:
    """Read a 4x4 matrix stored as 4 ASCII lines of 4 floats (FLIRT layout)."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rows.append([float(tok) for tok in line.split()])
    mat = np.array(rows, dtype=np.float64)
    if mat.shape != (4, 4):
        raise ValueError(f"{path}: expected 4 lines of 4 floats, got shape {mat.shape}")
    return mat


def save_affine_file(mat, path) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {mat.shape}")
    lines = ["  ".join(f"{v:.10g}" for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def world_voxel_map(world_mat, src: Volume, dst: Volume | dict) -> np.ndarray:
    """Voxel->voxel map from a world-mm source->destination affine.

    ``dst`` may be a volume or a dict with an ``affine`` entry (geometry of
    a grid that does not exist yet).
    """
    dst_affine = dst["affine"] if isinstance(dst, dict) else dst.affine
    m = as_affine(world_mat)
    return np.linalg.inv(as_affine(dst_affine)) @ m @ as_affine(src.affine)


def _flirt_scaled_voxel(vol: Volume) -> np.ndarray:
    """FSL scaled-voxel matrix: spacing scale, x-flipped for RAS+ grids."""
    p = np.eye(4)
    p[0, 0], p[1, 1], p[2, 2] = vol.spacing
    if np.linalg.det(vol.affine[:3, :3]) > 0:
        p[0, 0] = -vol.spacing[0]
        p[0, 3] = (vol.shape[0] - 1) * vol.spacing[0]
    return p


def flirt_voxel_map(flirt_mat, src: Volume, dst: Volume) -> np.ndarray:
    """Voxel->voxel map from an FSL FLIRT matrix (scaled-voxel convention)."""
    m = np.asarray(flirt_mat, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"FLIRT matrix must be 4x4, got {m.shape}")
    return np.linalg.inv(_flirt_scaled_voxel(dst)) @ m @ _flirt_scaled_voxel(src)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _source_coords(vox_map: np.ndarray, dst_shape) -> np.ndarray:
    """Source voxel coordinates (3, n) for every destination voxel."""
    try:
        inv = np.linalg.inv(vox_map)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular voxel map, cannot resample") from exc
    idx = np.indices(dst_shape, dtype=np.float64).reshape(3, -1)
    return inv[:3, :3] @ idx + inv[:3, 3:4]


def _sample_nearest(data: np.ndarray, coords: np.ndarray, dst_shape):
    # half-up rounding keeps ties deterministic across platforms
    nearest = np.floor(coords + 0.5).astype(np.int64)
    inside = np.ones(coords.shape[1], dtype=bool)
    for ax in range(3):
        inside &= (nearest[ax] >= 0) & (nearest[ax] < data.shape[ax])
    out = np.zeros(coords.shape[1], dtype=data.dtype)
    ii = nearest[:, inside]
    out[inside] = data[ii[0], ii[1], ii[2]]
    return out.reshape(dst_shape)

def _sample_trilinear(data: np.ndarray, coords: np.ndarray, dst_shape):
    # one-voxel zero pad makes every out-of-bounds corner contribute 0
    padded = np.pad(data.astype(np.float64), 1)
    c0 = np.floor(coords).astype(np.int64)
    frac = coords - c0
    out = np.zeros(coords.shape[1], dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.ones(coords.shape[1], dtype=np.float64)
        idx = np.empty_like(c0)
        for ax in range(3):
            w *= frac[ax] if offs[ax] else (1.0 - frac[ax])
            idx[ax] = np.clip(c0[ax] + offs[ax] + 1, 0, data.shape[ax] + 1)
        out += w * padded[idx[0], idx[1], idx[2]]
    return out.reshape(dst_shape)


def resample(
    src: Volume,
    vox_map,
    dst_shape: Sequence[int],
    dst_spacing: Sequence[float] | None = None,
    mode: str = "trilinear",
    dst_affine=None,
) -> Volume:
    """Resample ``src`` onto a destination grid through a voxel->voxel affine.

    ``vox_map`` maps source voxel indices to destination voxel indices;
    each destination voxel takes the value sampled at ``vox_map^-1 @ v`` in
    source voxel coordinates. Out-of-bounds samples are 0 (background).
    ``mode`` is "trilinear" (scalar volumes only) or "nearest".

    Without ``dst_affine`` the output affine is the pull-back
    ``src.affine @ vox_map^-1`` (same physical object on a new grid); pass
    the target frame's affine when the map registers content into another
    space.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if mode == "trilinear" and isinstance(src, LabelVolume):
        raise ValueError("trilinear resampling is not defined for label volumes")
    vox_map = np.asarray(vox_map, dtype=np.float64)
    if vox_map.shape != (4, 4):
        raise ValueError(f"voxel map must be 4x4, got {vox_map.shape}")
    dst_shape = tuple(int(d) for d in dst_shape)

    coords = _source_coords(vox_map, dst_shape)
    if mode == "nearest":
        out = _sample_nearest(src.data, coords, dst_shape)
    else:
        out = _sample_trilinear(src.data, coords, dst_shape).astype(
            src.data.dtype, copy=False)

    spacing = _check_spacing(dst_spacing) if dst_spacing is not None else src.spacing
    if dst_affine is None:
        dst_affine = src.affine @ np.linalg.inv(vox_map)
    if isinstance(src, LabelVolume):
        # out-of-bounds regions become background, so 0 joins the alphabet
        alpha = None if src.alphabet is None else src.alphabet | {0}
        return LabelVolume(out, spacing, dst_affine, alphabet=alpha)
    return ScalarVolume(out, spacing, dst_affine)
