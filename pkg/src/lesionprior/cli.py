"""Command-line pipeline: heatmaps -> VOI map -> fusion -> training -> evaluation.

Subcommands:
  make-fixture    generate a synthetic demo cohort
  build-heatmaps  accumulate per-lesion-type occurrence counts in atlas space
  build-voi       threshold heatmaps into the 10-label VOI map
  fuse            normalize modalities and stack them with the VOI channels
  train           fit the 3D U-Net on fused cases
  predict         run one or more checkpoints (ensemble) on fused cases
  evaluate        score predictions against ground truth into a CSV report
  render-slice    dump a 2-D slice as PGM (grayscale) or PPM (VOI palette)
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import fixture, metrics, prior, train as training, unet
from .nifti import read_nifti, write_nifti
from .preprocess import fuse_channels, load_fused, preprocess_modalities, save_fused
from .prior import split_voi_channels
from .volume import (
    LabelVolume,
    ScalarVolume,
    flirt_voxel_map,
    load_affine_file,
    resample,
    world_voxel_map,
)

MODALITY_KEYS = ("t1", "t1c", "t2", "flair")

VOI_PALETTE = {
    0: (0, 0, 0),        # background
    1: (255, 0, 0),      # red
    2: (0, 128, 0),      # green
    3: (0, 0, 255),      # blue
    4: (255, 255, 0),    # yellow
    5: (255, 165, 0),    # orange
    6: (255, 192, 203),  # pink
    7: (128, 0, 128),    # purple
    8: (128, 128, 128),  # grey
    9: (139, 69, 19),    # brown
}


class CliError(Exception):
    """User-facing failure: message printed, exit code 1."""


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class CaseEntry:
    case_id: str
    modalities: dict[str, Path]
    gt: Path
    affine: Path | None
    affine_convention: str


@dataclass
class Manifest:
    atlas_shape: tuple[int, int, int]
    atlas_spacing: tuple[float, float, float]
    atlas_affine: np.ndarray
    cases: list[CaseEntry]

    def atlas_ref(self) -> LabelVolume:
        """Empty volume carrying the atlas geometry."""
        return LabelVolume(np.zeros(self.atlas_shape, np.uint8),
                           self.atlas_spacing, self.atlas_affine)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent

    def resolve(rel, what, case_id):
        p = base / rel
        if not p.exists():
            raise CliError(f"manifest case {case_id}: missing {what} file {p}")
        return p

    atlas = raw.get("atlas")
    if not atlas:
        raise CliError(f"{path}: manifest lacks an 'atlas' section")
    cases = []
    for entry in raw.get("cases", []):
        case_id = entry.get("id") or f"case{len(cases)}"
        mods = {}
        for key in MODALITY_KEYS:
            rel = entry.get("modalities", {}).get(key)
            if rel is None:
                raise CliError(f"manifest case {case_id}: modality {key} missing")
            mods[key] = resolve(rel, f"modality {key}", case_id)
        gt = resolve(entry["gt"], "ground truth", case_id) if "gt" in entry else None
        affine = (resolve(entry["affine"], "affine", case_id)
                  if entry.get("affine") else None)
        cases.append(CaseEntry(
            case_id=case_id,
            modalities=mods,
            gt=gt,
            affine=affine,
            affine_convention=entry.get("affine_convention", "world"),
        ))
    if not cases:
        raise CliError(f"{path}: manifest lists no cases")
    return Manifest(
        atlas_shape=tuple(int(v) for v in atlas["shape"]),
        atlas_spacing=tuple(float(v) for v in atlas.get("spacing", (1, 1, 1))),
        atlas_affine=np.asarray(atlas.get("affine", np.eye(4).tolist())),
        cases=cases,
    )


def _subject_to_atlas_map(case: CaseEntry, subject, atlas_ref) -> np.ndarray:
    """Voxel->voxel map from the case's affine file (identity if absent)."""
    if case.affine is None:
        mat = np.eye(4)
    else:
        mat = load_affine_file(case.affine)
    if case.affine_convention == "world":
        return world_voxel_map(mat, subject, atlas_ref)
    if case.affine_convention == "flirt":
        return flirt_voxel_map(mat, subject, atlas_ref)
    raise CliError(f"case {case.case_id}: unknown affine convention "
                   f"{case.affine_convention!r}")


def _select_cases(manifest: Manifest, case_ids) -> list[CaseEntry]:
    if not case_ids:
        return manifest.cases
    by_id = {c.case_id: c for c in manifest.cases}
    missing = [cid for cid in case_ids if cid not in by_id]
    if missing:
        raise CliError(f"case ids not in manifest: {', '.join(missing)}")
    return [by_id[cid] for cid in case_ids]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_make_fixture(args) -> int:
    shape = args.shape if len(args.shape) == 3 else args.shape * 3
    manifest = fixture.make_fixture(
        args.out, n_cases=args.cases, shape=shape, seed=args.seed,
        translate=not args.no_translate, n_decoys=args.decoys)
    print(f"wrote {manifest}")
    return 0


def cmd_build_heatmaps(args) -> int:
    manifest = load_manifest(args.manifest)
    atlas_ref = manifest.atlas_ref()
    triples = []
    for case in _select_cases(manifest, args.case_ids):
        if case.gt is None:
            raise CliError(f"case {case.case_id} has no ground-truth mask")
        gt = read_nifti(case.gt, kind="label")
        vox_map = _subject_to_atlas_map(case, gt, atlas_ref)
        aligned = resample(gt, vox_map, manifest.atlas_shape,
                           manifest.atlas_spacing, mode="nearest",
                           dst_affine=manifest.atlas_affine)
        triples.append(prior.split_lesion_mask(aligned))
    h_ed, h_ncr, h_et = prior.accumulate_heatmaps(triples)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, vol in (("h_ed", h_ed), ("h_ncr", h_ncr), ("h_et", h_et)):
        write_nifti(vol, out / f"{name}.nii.gz", dtype=np.int32)
    print(f"accumulated {len(triples)} subjects -> {out}")
    return 0


def cmd_build_voi(args) -> int:
    h_ed, h_ncr, h_et = (read_nifti(p, kind="label") for p in args.heatmaps)
    voi = prior.build_voi(h_ed, h_ncr, h_et, percentiles=args.percentiles,
                          skip_empty=args.skip_empty)
    write_nifti(voi, args.out)
    print(f"VOI map -> {args.out}")
    if args.distribution_csv:
        if not args.n_subjects:
            raise CliError("--distribution-csv needs --n-subjects")
        table, voxels = prior.label_distribution(voi, h_ed, h_ncr, h_et,
                                                 args.n_subjects)
        prior.write_distribution_csv(table, voxels, args.distribution_csv)
        print(f"label distribution -> {args.distribution_csv}")
    return 0


def cmd_fuse(args) -> int:
    manifest = load_manifest(args.manifest)
    atlas_ref = manifest.atlas_ref()
    voi = None
    if not args.no_voi:
        if not args.voi:
            raise CliError("fuse needs --voi (or pass --no-voi for the "
                           "baseline input)")
        voi = read_nifti(args.voi, kind="label")

    out_root = Path(args.out)
    for case in _select_cases(manifest, args.case_ids):
        mods = [read_nifti(case.modalities[k], kind="scalar")
                for k in MODALITY_KEYS]
        normalized, _ = preprocess_modalities(mods)
        channels = None
        if voi is not None:
            subject = mods[0]
            to_atlas = _subject_to_atlas_map(case, subject, atlas_ref)
            voi_subj = resample(voi, np.linalg.inv(to_atlas), subject.shape,
                                subject.spacing, mode="nearest",
                                dst_affine=subject.affine)
            channels = split_voi_channels(voi_subj)
        fused = fuse_channels(normalized, channels)
        save_fused(fused, out_root / case.case_id, case.case_id,
                   gt_path=case.gt)
    print(f"fused {args.manifest} -> {out_root} "
          f"({4 if args.no_voi else 13} channels per case)")
    return 0


def _find_fused_cases(cases_dir, case_ids=None) -> list[Path]:
    root = Path(cases_dir)
    manifests = sorted(root.glob("*/channels.json"))
    if not manifests:
        raise CliError(f"no fused cases (*/channels.json) under {root}")
    if case_ids:
        wanted = set(case_ids)
        manifests = [m for m in manifests if m.parent.name in wanted]
        missing = wanted - {m.parent.name for m in manifests}
        if missing:
            raise CliError(f"fused cases not found: {', '.join(sorted(missing))}")
    return manifests


def cmd_train(args) -> int:
    cfg = (training.TrainConfig.from_json(args.config) if args.config
           else training.TrainConfig())
    overrides = {}
    for field_name in ("epochs", "batch_size", "seed", "lr0", "weight_decay",
                       "neg_pos_ratio", "lr_mode"):
        value = getattr(args, field_name)
        if value is not None:
            overrides[field_name] = value
    if args.patch_size is not None:
        overrides["patch_size"] = tuple(args.patch_size) \
            if len(args.patch_size) == 3 else (args.patch_size[0],) * 3
    cfg = replace(cfg, **overrides)

    cases = []
    for manifest_path in _find_fused_cases(args.cases_dir, args.case_ids):
        fused, case_id, gt_path = load_fused(manifest_path)
        if gt_path is None:
            raise CliError(f"{manifest_path}: fused case lacks a gt reference")
        gt = read_nifti(gt_path, kind="label")
        cases.append(training.make_case(case_id, fused, gt.data))

    net_cfg = unet.UNetConfig(
        in_channels=cases[0].channels.shape[0],
        n_classes=args.classes, levels=args.levels,
        base_width=args.base_width, groups=args.groups, dropout=args.dropout)

    params, history = training.train_loop(cases, cfg, net_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    unet.save_checkpoint(out, net_cfg, params)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    training.write_history_csv(history, log_path)
    print(f"trained {len(cases)} cases x {cfg.epochs} epochs -> {out} "
          f"(final loss {history[-1][2]:.4f}, log {log_path})")
    return 0


def cmd_predict(args) -> int:
    members = [unet.load_checkpoint(p) for p in args.checkpoint]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for manifest_path in _find_fused_cases(args.cases_dir, args.case_ids):
        fused, case_id, _ = load_fused(manifest_path)
        pred = training.ensemble_predict(members, fused.data)
        vol = LabelVolume(pred, fused.spacing, fused.affine,
                          alphabet={0, 1, 2, 4})
        write_nifti(vol, out_dir / f"{case_id}.nii.gz")
    print(f"predictions ({len(members)} member(s)) -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    reports = []
    for case in _select_cases(manifest, args.case_ids):
        pred_path = pred_dir / f"{case.case_id}.nii.gz"
        if not pred_path.exists():
            raise CliError(f"missing prediction {pred_path}")
        if case.gt is None:
            raise CliError(f"case {case.case_id} has no ground truth")
        gt = read_nifti(case.gt, kind="label")
        pred = read_nifti(pred_path, kind="label")
        reports.append(metrics.evaluate_case(gt, pred, case.case_id))
    metrics.write_report_csv(reports, args.out)
    mean_wt = np.mean([r.dsc["WT"] for r in reports])
    print(f"evaluated {len(reports)} cases -> {args.out} "
          f"(mean WT DSC {mean_wt:.3f})")
    return 0


def _write_pgm(slice2d: np.ndarray, path: Path) -> None:
    lo = float(slice2d.min())
    hi = float(slice2d.max())
    if hi > lo:
        gray = np.round((slice2d - lo) / (hi - lo) * 255).astype(np.uint8)
    else:
        gray = np.full(slice2d.shape, 128, np.uint8)
    header = f"P5\n{slice2d.shape[1]} {slice2d.shape[0]}\n255\n"
    path.write_bytes(header.encode() + gray.tobytes())


def _write_ppm(slice2d: np.ndarray, path: Path) -> None:
    labels = slice2d.astype(np.int64)
    if labels.min() < 0 or labels.max() > 9:
        raise CliError("PPM rendering expects VOI labels 0..9")
    lut = np.zeros((10, 3), np.uint8)
    for lab, rgb in VOI_PALETTE.items():
        lut[lab] = rgb
    rgb = lut[labels]
    header = f"P6\n{slice2d.shape[1]} {slice2d.shape[0]}\n255\n"
    path.write_bytes(header.encode() + rgb.tobytes())


def cmd_render_slice(args) -> int:
    vol = read_nifti(args.volume)
    if not 0 <= args.axis <= 2:
        raise CliError(f"axis must be 0, 1, or 2, got {args.axis}")
    if not 0 <= args.index < vol.shape[args.axis]:
        raise CliError(f"index {args.index} out of range for axis "
                       f"{args.axis} (size {vol.shape[args.axis]})")
    slice2d = np.take(vol.data, args.index, axis=args.axis)
    out = Path(args.out)
    if out.suffix == ".pgm":
        _write_pgm(slice2d.astype(np.float64), out)
    elif out.suffix == ".ppm":
        _write_ppm(slice2d, out)
    else:
        raise CliError(f"output must end in .pgm or .ppm, got {out.name}")
    print(f"slice -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionprior",
        description="Lesion-prior heatmaps, VOI fusion, and 3D U-Net "
                    "segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=6)
    p.add_argument("--shape", type=int, nargs="+", default=[32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decoys", type=int, default=1)
    p.add_argument("--no-translate", action="store_true")
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("build-heatmaps",
                       help="accumulate lesion heatmaps in atlas space")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--case-ids", nargs="*", default=None)
    p.set_defaults(func=cmd_build_heatmaps)

    p = sub.add_parser("build-voi", help="threshold heatmaps into a VOI map")
    p.add_argument("--heatmaps", nargs=3, required=True,
                   metavar=("H_ED", "H_NCR", "H_ET"))
    p.add_argument("--percentiles", nargs=3, type=float,
                   default=list(prior.DEFAULT_PERCENTILES),
                   metavar=("A", "B", "G"))
    p.add_argument("--skip-empty", action="store_true",
                   help="ignore lesion types whose heatmap is empty")
    p.add_argument("--out", required=True)
    p.add_argument("--distribution-csv", default=None)
    p.add_argument("--n-subjects", type=int, default=None)
    p.set_defaults(func=cmd_build_voi)

    p = sub.add_parser("fuse", help="normalize and stack network inputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--voi", default=None)
    p.add_argument("--no-voi", action="store_true",
                   help="4-channel baseline input (no prior)")
    p.add_argument("--out", required=True)
    p.add_argument("--case-ids", nargs="*", default=None)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train the 3D U-Net on fused cases")
    p.add_argument("--cases-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--case-ids", nargs="*", default=None)
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patch-size", type=int, nargs="+", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--neg-pos-ratio", type=int, default=None)
    p.add_argument("--lr-mode", choices=("normalized", "literal"), default=None)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--log", default=None, help="loss CSV (default: <out>.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment fused cases with checkpoints")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="repeat for an ensemble")
    p.add_argument("--cases-dir", required=True)
    p.add_argument("--case-ids", nargs="*", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions into a CSV report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--case-ids", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-slice", help="render one slice to PGM/PPM")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True, help="*.pgm (gray) or *.ppm (VOI)")
    p.set_defaults(func=cmd_render_slice)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface as exit code, not traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
