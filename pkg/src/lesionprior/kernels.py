"""Kernel backend selection: compiled extension when available, numpy otherwise.

Set LESIONPRIOR_PURE_PYTHON=1 to force the numpy kernels even when
:mod:`lesionprior._core` was compiled. The active choice is reported by
:func:`backend_name`; both backends implement the same contracts and are
exercised by the same tests.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_np

_FORCE_PURE = os.environ.get("LESIONPRIOR_PURE_PYTHON", "") not in ("", "0")
_core = None
if not _FORCE_PURE:
    try:
        from . import _core
    except ImportError:
        _core = None


def backend_name() -> str:
    return "compiled" if _core is not None else "numpy"


def _check_conv_args(x, k, b):
    if x.ndim != 5 or k.ndim != 5 or b.ndim != 1:
        raise ValueError("conv3d expects x (N,C,D,H,W), k (O,C,k,k,k), b (O,)")
    if x.shape[1] != k.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if k.shape[0] != b.shape[0]:
        raise ValueError("bias length must equal the output channel count")
    if not (k.shape[2] == k.shape[3] == k.shape[4]):
        raise ValueError(f"kernel must be cubic, got {k.shape[2:]}")
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"conv3d supports float32/float64, got {x.dtype}")
    if k.dtype != x.dtype or b.dtype != x.dtype:
        raise TypeError("x, k, b must share one float dtype")


def conv3d_forward(x, k, b, pad):
    """Stride-1 cross-correlation with zero padding ``pad`` per spatial axis."""
    _check_conv_args(x, k, b)
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k)
    b = np.ascontiguousarray(b)
    if _core is not None:
        return _core.conv3d_forward(x, k, b, int(pad))
    return _kernels_np.conv3d_forward(x, k, b, int(pad))


def conv3d_backward(x, k, dy, pad):
    """Gradients (dx, dk, db) of conv3d_forward at (x, k, b)."""
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k)
    dy = np.ascontiguousarray(dy)
    if _core is not None:
        return _core.conv3d_backward(x, k, dy, int(pad))
    return _kernels_np.conv3d_backward(x, k, dy, int(pad))


def edt_sq(features, spacing) -> np.ndarray:
    """Squared Euclidean distance (mm^2) to the nearest True voxel.

    Returns +inf everywhere when ``features`` has no True voxel.
    """
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError(f"expected a 3-D mask, got shape {features.shape}")
    sx, sy, sz = (float(s) for s in spacing)
    if _core is not None:
        mask = np.ascontiguousarray(features != 0, dtype=np.uint8)
        if not mask.any():
            return np.full(features.shape, np.inf)
        return _core.edt_sq(mask, sx, sy, sz)
    return _kernels_np.edt_sq(features != 0, (sx, sy, sz))
