"""Lesion-prior fusion toolkit for volumetric brain-lesion segmentation.

Builds per-lesion-type occurrence heatmaps from a cohort of ground-truth
masks, derives a 10-label volume-of-interest (VOI) map from them, fuses the
VOI channels with multimodal MR volumes into a 13-channel input, trains a
small self-contained 3D U-Net on the fused volumes, and evaluates
predictions with Dice and (95th-percentile) Hausdorff distances.
"""

import os as _os

# Cap parallelism (BLAS/OpenMP thread pools) before numpy is imported
# anywhere in the package. Only effective if numpy is not yet loaded.
_threads = _os.environ.get("LESIONPRIOR_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .volume import (  # noqa: E402
    AffineConventionError,
    EmptySupportError,
    GeometryError,
    LabelVolume,
    ScalarVolume,
    as_affine,
    percentile_nonzero,
    resample,
)
from .nifti import NiftiError, read_nifti, write_nifti  # noqa: E402

__all__ = [
    "AffineConventionError",
    "EmptySupportError",
    "GeometryError",
    "LabelVolume",
    "NiftiError",
    "ScalarVolume",
    "as_affine",
    "percentile_nonzero",
    "read_nifti",
    "resample",
    "write_nifti",
    "__version__",
]
