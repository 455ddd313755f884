"""Synthetic mini-cohort generator for demos and end-to-end tests.

Each case is a skull-stripped "brain" ellipsoid with a nested spherical
lesion (edema around necrosis around enhancing core) drawn near a fixed
anatomical hotspot, so lesion location correlates across the cohort and a
location prior carries real information. Decoy blobs with exactly the
edema intensity signature appear far from the hotspot: they are
indistinguishable from lesions by contrast alone, only by location.

Volumes are written as NIfTI files with per-case subject->atlas affine
files (integer world translations) and a manifest.json tying them together.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nifti import write_nifti
from .volume import LabelVolume, ScalarVolume, save_affine_file

HOTSPOT_FRACTION = (0.36, 0.44, 0.50)
NOISE_SIGMA = 0.08
EDEMA_T2_BUMP = 0.65
EDEMA_FLAIR_BUMP = 0.85
ET_T1C_BUMP = 0.90
TC_T1_DIP = 0.45


def _sphere(shape, center, radius):
    grid = np.indices(shape, dtype=np.float64)
    d2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
    return d2 <= radius * radius


def _ellipsoid(shape, center, radii):
    grid = np.indices(shape, dtype=np.float64)
    d2 = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return d2 <= 1.0


def _place_decoy(rng, brain_center, brain_r, lesion_center, r_wt, r_decoy):
    """Random center inside the brain, far from the lesion."""
    for _ in range(200):
        cand = brain_center + rng.uniform(-0.85, 0.85, size=3) * brain_r
        if np.linalg.norm(cand - brain_center) > brain_r - 2.0:
            continue
        if np.linalg.norm(cand - lesion_center) < r_wt + r_decoy + 2:
            continue
        return cand
    # fall back to the point opposite the lesion
    away = brain_center + (brain_center - lesion_center)
    return away


def _make_case(shape, seed, case_index, translate, n_decoys):
    rng = np.random.default_rng((seed, case_index))
    shape = np.asarray(shape)
    t = (rng.integers(-2, 3, size=3) if translate else np.zeros(3, int))

    brain_center = shape / 2.0 + t
    brain_radii = 0.40 * shape
    brain = _ellipsoid(tuple(shape), brain_center, brain_radii)

    hotspot = np.asarray(HOTSPOT_FRACTION) * shape
    jitter = 0.045 * shape.min()
    lesion_center = hotspot + rng.uniform(-jitter, jitter, size=3) + t
    r_wt = rng.uniform(0.18, 0.22) * shape.min()
    wt = _sphere(tuple(shape), lesion_center, r_wt) & brain
    tc = _sphere(tuple(shape), lesion_center, 0.62 * r_wt) & brain
    et = _sphere(tuple(shape), lesion_center, 0.38 * r_wt) & brain

    gt = np.zeros(tuple(shape), np.uint8)
    gt[wt] = 2          # edema
    gt[tc] = 1          # necrosis / non-enhancing
    gt[et] = 4          # enhancing tumor

    # decoys are structural lesion clones (nested rings, full multimodal
    # signature) in implausible locations; only position tells them apart
    d_wt = np.zeros(tuple(shape), bool)
    d_tc = np.zeros(tuple(shape), bool)
    d_et = np.zeros(tuple(shape), bool)
    for _ in range(n_decoys):
        r_decoy = rng.uniform(0.6, 0.85) * r_wt
        center = _place_decoy(rng, brain_center, brain_radii.min(),
                              lesion_center, r_wt, r_decoy)
        d_wt |= _sphere(tuple(shape), center, r_decoy) & brain
        d_tc |= _sphere(tuple(shape), center, 0.62 * r_decoy) & brain
        d_et |= _sphere(tuple(shape), center, 0.38 * r_decoy) & brain
    for m in (d_wt, d_tc, d_et):
        m &= ~wt

    grid = np.indices(tuple(shape), dtype=np.float64)
    ramp = 0.1 * (grid[2] / shape[2] - 0.5)
    base = 1.0 + ramp

    def modality(bumps):
        img = base + bumps + rng.normal(0.0, NOISE_SIGMA, size=tuple(shape))
        img = np.maximum(img, 0.02)
        img[~brain] = 0.0
        return img.astype(np.float32)

    wt_f = (wt | d_wt).astype(np.float64)
    tc_f = (tc | d_tc).astype(np.float64)
    et_f = (et | d_et).astype(np.float64)

    images = {
        "t1": modality(-TC_T1_DIP * tc_f),
        "t1c": modality(ET_T1C_BUMP * et_f),
        "t2": modality(EDEMA_T2_BUMP * wt_f),
        "flair": modality(EDEMA_FLAIR_BUMP * wt_f),
    }
    # subject -> atlas world translation undoes the subject shift
    world = np.eye(4)
    world[:3, 3] = -t
    return images, gt, world


def make_fixture(out_dir, n_cases=6, shape=(32, 32, 32), seed=0,
                 translate=True, n_decoys=1) -> Path:
    """Generate a cohort under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = tuple(int(s) for s in shape)

    atlas = {
        "shape": list(shape),
        "spacing": [1.0, 1.0, 1.0],
        "affine": np.eye(4).tolist(),
    }
    cases = []
    for i in range(n_cases):
        case_id = f"case{i:03d}"
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        images, gt, world = _make_case(shape, seed, i, translate, n_decoys)

        entry = {"id": case_id, "modalities": {}, "affine_convention": "world"}
        for name, data in images.items():
            path = case_dir / f"{name}.nii.gz"
            write_nifti(ScalarVolume(data), path)
            entry["modalities"][name] = f"{case_id}/{name}.nii.gz"
        write_nifti(LabelVolume(gt, alphabet={0, 1, 2, 4}),
                    case_dir / "gt.nii.gz")
        entry["gt"] = f"{case_id}/gt.nii.gz"
        save_affine_file(world, case_dir / "to_atlas.mat")
        entry["affine"] = f"{case_id}/to_atlas.mat"
        cases.append(entry)

    manifest = {"atlas": atlas, "cases": cases}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
