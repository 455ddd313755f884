"""Numpy implementations of the hot kernels.

Fallback for :mod:`lesionprior._core`. The 3-D convolutions are expressed
as im2col matrix products so BLAS does the arithmetic; the distance
transform drives scipy's exact EDT and rebuilds squared distances from the
nearest-feature indices so results match the compiled kernel bit for bit
on integer-spacing grids.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import distance_transform_edt


def _windows_matrix(x: np.ndarray, ksize: int, pad: int) -> np.ndarray:
    """im2col: (N*D*H*W, C*k^3) matrix of receptive fields."""
    if pad:
        x = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    w = sliding_window_view(x, (ksize, ksize, ksize), axis=(2, 3, 4))
    n, c, d, h, wd = w.shape[:5]
    return w.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * d * h * wd, -1)


def conv3d_forward(x, k, b, pad):
    n = x.shape[0]
    o, _, ksize = k.shape[:3]
    m = _windows_matrix(x, ksize, pad)
    y = m @ k.reshape(o, -1).T
    d, h, w = (s + 2 * pad - ksize + 1 for s in x.shape[2:])
    y = y.reshape(n, d, h, w, o).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(y + b.reshape(1, -1, 1, 1, 1))


def conv3d_backward(x, k, dy, pad):
    n, c = x.shape[:2]
    o, _, ksize = k.shape[:3]
    db = dy.sum(axis=(0, 2, 3, 4))

    m = _windows_matrix(x, ksize, pad)
    dyf = dy.transpose(0, 2, 3, 4, 1).reshape(-1, o)
    dk = (m.T @ dyf).T.reshape(k.shape)

    # dx = full correlation of dy with the spatially flipped, transposed kernel
    fpad = ksize - 1 - pad
    md = _windows_matrix(dy, ksize, fpad)
    kr = k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(c, -1)
    dx = (md @ kr.T).reshape(n, *x.shape[2:], c).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dk), db


def edt_sq(features: np.ndarray, spacing) -> np.ndarray:
    """Squared Euclidean distance (in mm^2) to the nearest True voxel."""
    features = np.asarray(features, dtype=bool)
    if not features.any():
        return np.full(features.shape, np.inf)
    idx = distance_transform_edt(
        ~features, sampling=spacing, return_distances=False, return_indices=True)
    grid = np.indices(features.shape, dtype=np.int64)
    out = np.zeros(features.shape, dtype=np.float64)
    for ax in range(3):
        delta = (grid[ax] - idx[ax]).astype(np.float64) * float(spacing[ax])
        out += delta * delta
    return out
