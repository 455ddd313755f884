"""Network layers with analytic forward/backward passes.

Every layer is a pair of pure functions: ``*_forward(...) -> (y, cache)``
and ``*_backward(cache, dy) -> gradients``. Activations are 5-D tensors
(N, C, D, H, W); convolutions run through the kernel backend.
"""

from __future__ import annotations

import numpy as np

from . import kernels

GN_EPS = 1e-5


# --- 3x3x3 / 1x1x1 convolution ---------------------------------------------

def conv3d_forward(x, k, b, pad=1):
    y = kernels.conv3d_forward(x, k, b, pad)
    return y, (x, k, pad)


def conv3d_backward(cache, dy):
    x, k, pad = cache
    return kernels.conv3d_backward(x, k, dy, pad)


# --- group normalization -----------------------------------------------------

def groupnorm_forward(x, gamma, beta, groups=4, eps=GN_EPS):
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)  # population variance
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(x.shape)
    y = xhat * gamma.reshape(1, c, 1, 1, 1) + beta.reshape(1, c, 1, 1, 1)
    return y, (xhat, rstd, gamma, groups)


def groupnorm_backward(cache, dy):
    xhat, rstd, gamma, groups = cache
    n, c = dy.shape[:2]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3, 4))
    dbeta = dy.sum(axis=(0, 2, 3, 4))
    dxhat = (dy * gamma.reshape(1, c, 1, 1, 1)).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    mean_dxhat = dxhat.mean(axis=2, keepdims=True)
    mean_dxhat_xh = (dxhat * xh).mean(axis=2, keepdims=True)
    dx = rstd * (dxhat - mean_dxhat - xh * mean_dxhat_xh)
    return dx.reshape(dy.shape), dgamma, dbeta


# --- ReLU ---------------------------------------------------------------------

def relu_forward(x):
    y = np.maximum(x, 0)
    return y, x > 0


def relu_backward(cache, dy):
    return dy * cache


# --- inverted dropout ----------------------------------------------------------

def dropout_forward(x, rate, rng=None, train=False):
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    y = x * (keep.astype(x.dtype) * x.dtype.type(scale))
    return y, (keep, scale)


def dropout_backward(cache, dy):
    if cache is None:
        return dy
    keep, scale = cache
    return dy * (keep.astype(dy.dtype) * dy.dtype.type(scale))


# --- 2x2x2 max pooling ----------------------------------------------------------

def maxpool2_forward(x):
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial dims, got {(d, h, w)}")
    blocks = (x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 6, 3, 5, 7)
               .reshape(n, c, d // 2, h // 2, w // 2, 8))
    arg = blocks.argmax(axis=-1)  # first occurrence wins ties
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def maxpool2_backward(cache, dy):
    (n, c, d, h, w), arg = cache
    scattered = np.zeros((n, c, d // 2, h // 2, w // 2, 8), dtype=dy.dtype)
    np.put_along_axis(scattered, arg[..., None], dy[..., None], axis=-1)
    dx = (scattered.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
                   .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                   .reshape(n, c, d, h, w))
    return np.ascontiguousarray(dx)


# --- 2x trilinear upsampling ------------------------------------------------------

def _up_weights(n_in: int, dtype) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel-center convention."""
    out = np.zeros((2 * n_in, n_in), dtype=dtype)
    for i in range(2 * n_in):
        s = (i + 0.5) / 2.0 - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        t = s - i0
        out[i, i0] += 1.0 - t
        out[i, min(i0 + 1, n_in - 1)] += t
    return out


def _apply_axis(x, mat, axis):
    moved = np.tensordot(x, mat, axes=([axis], [1]))
    return np.ascontiguousarray(np.moveaxis(moved, -1, axis))


def upsample2_forward(x):
    dims = x.shape[2:]
    y = x
    for ax, n_in in enumerate(dims):
        y = _apply_axis(y, _up_weights(n_in, np.float64).astype(x.dtype), ax + 2)
    return y, dims


def upsample2_backward(cache, dy):
    dims = cache
    dx = dy
    for ax, n_in in enumerate(dims):
        w = _up_weights(n_in, np.float64).astype(dy.dtype)
        dx = _apply_axis(dx, w.T, ax + 2)  # adjoint: transposed weights
    return dx
