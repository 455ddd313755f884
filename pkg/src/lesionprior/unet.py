"""A small 3D U-Net assembled from the layers module.

Encoder: per level, two (conv3x3x3 -> group norm -> ReLU) units followed by
dropout, with 2x max pooling between levels. Decoder: 2x trilinear
upsampling, concatenation with the encoder skip, then two conv units.
A final 1x1x1 convolution maps to class logits. Width doubles per level.

Parameters live in an ordered name -> array dict; the checkpoint format is
a magic string, a JSON descriptor, then raw little-endian float32 arrays
in declaration order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .layers import (
    conv3d_backward,
    conv3d_forward,
    dropout_backward,
    dropout_forward,
    groupnorm_backward,
    groupnorm_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    upsample2_backward,
    upsample2_forward,
)

CHECKPOINT_MAGIC = b"LPUNET1\n"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 13
    n_classes: int = 4
    levels: int = 3
    base_width: int = 8
    groups: int = 4
    dropout: float = 0.3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one resolution level")
        for width in self.widths():
            if width % self.groups:
                raise ValueError(
                    f"group count {self.groups} must divide width {width}")

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** lvl for lvl in range(self.levels)]

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)


def _block_param_names(prefix: str):
    for unit in (1, 2):
        yield f"{prefix}.conv{unit}.w"
        yield f"{prefix}.conv{unit}.b"
        yield f"{prefix}.gn{unit}.g"
        yield f"{prefix}.gn{unit}.b"


def _block_channel_plan(cfg: UNetConfig):
    """Yields (prefix, c_in, c_out) for every conv block in declaration order."""
    widths = cfg.widths()
    prev = cfg.in_channels
    for lvl in range(cfg.levels):
        yield f"enc{lvl}", prev, widths[lvl]
        prev = widths[lvl]
    for lvl in reversed(range(cfg.levels - 1)):
        yield f"dec{lvl}", widths[lvl] + widths[lvl + 1], widths[lvl]


def init_params(cfg: UNetConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He fan-in initialization; group-norm scale 1, shift 0; zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def add_block(prefix, c_in, c_out):
        for unit, cin in ((1, c_in), (2, c_out)):
            fan_in = cin * 27
            params[f"{prefix}.conv{unit}.w"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), size=(c_out, cin, 3, 3, 3)
            ).astype(dtype)
            params[f"{prefix}.conv{unit}.b"] = np.zeros(c_out, dtype)
            params[f"{prefix}.gn{unit}.g"] = np.ones(c_out, dtype)
            params[f"{prefix}.gn{unit}.b"] = np.zeros(c_out, dtype)

    for prefix, c_in, c_out in _block_channel_plan(cfg):
        add_block(prefix, c_in, c_out)

    head_in = cfg.widths()[0]
    params["head.w"] = rng.normal(
        0.0, np.sqrt(2.0 / head_in), size=(cfg.n_classes, head_in, 1, 1, 1)
    ).astype(dtype)
    params["head.b"] = np.zeros(cfg.n_classes, dtype)
    return params


def _block_forward(params, prefix, x, cfg, train, rng, with_dropout):
    caches = []
    h = x
    for unit in (1, 2):
        h, c_conv = conv3d_forward(h, params[f"{prefix}.conv{unit}.w"],
                                   params[f"{prefix}.conv{unit}.b"], pad=1)
        h, c_gn = groupnorm_forward(h, params[f"{prefix}.gn{unit}.g"],
                                    params[f"{prefix}.gn{unit}.b"], cfg.groups)
        h, c_relu = relu_forward(h)
        caches.append((c_conv, c_gn, c_relu))
    c_drop = None
    if with_dropout:
        h, c_drop = dropout_forward(h, cfg.dropout, rng, train)
    return h, (prefix, caches, c_drop)


def _block_backward(params, cache, dy, grads):
    prefix, caches, c_drop = cache
    dh = dropout_backward(c_drop, dy) if c_drop is not None else dy
    for unit, (c_conv, c_gn, c_relu) in zip((2, 1), reversed(caches)):
        dh = relu_backward(c_relu, dh)
        dh, dg, db_gn = groupnorm_backward(c_gn, dh)
        grads[f"{prefix}.gn{unit}.g"] = dg
        grads[f"{prefix}.gn{unit}.b"] = db_gn
        dh, dw, db = conv3d_backward(c_conv, dh)
        grads[f"{prefix}.conv{unit}.w"] = dw
        grads[f"{prefix}.conv{unit}.b"] = db
    return dh


def forward(cfg: UNetConfig, params, x, train=False, rng=None):
    """Run the network; returns (logits, cache for backward)."""
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input (N, {cfg.in_channels}, D, H, W), "
                         f"got {x.shape}")
    div = cfg.spatial_divisor
    if any(s % div for s in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {div}")

    skips = []
    enc_caches = []
    pool_caches = []
    h = x
    for lvl in range(cfg.levels):
        h, cache = _block_forward(params, f"enc{lvl}", h, cfg, train, rng,
                                  with_dropout=True)
        enc_caches.append(cache)
        if lvl < cfg.levels - 1:
            skips.append(h)
            h, pc = maxpool2_forward(h)
            pool_caches.append(pc)

    dec_caches = []
    for lvl in reversed(range(cfg.levels - 1)):
        h, uc = upsample2_forward(h)
        skip = skips[lvl]
        h = np.concatenate([skip, h], axis=1)
        h, cache = _block_forward(params, f"dec{lvl}", h, cfg, train, rng,
                                  with_dropout=False)
        dec_caches.append((lvl, uc, skip.shape[1], cache))

    logits, head_cache = conv3d_forward(h, params["head.w"], params["head.b"],
                                        pad=0)
    return logits, (enc_caches, pool_caches, dec_caches, head_cache)


def backward(cfg: UNetConfig, params, cache, dlogits):
    """Gradients of every parameter for the given output gradient."""
    enc_caches, pool_caches, dec_caches, head_cache = cache
    grads: dict[str, np.ndarray] = {}

    dh, dw, db = conv3d_backward(head_cache, dlogits)
    grads["head.w"] = dw
    grads["head.b"] = db

    dskips = {}
    for lvl, uc, n_skip, block_cache in reversed(dec_caches):
        dh = _block_backward(params, block_cache, dh, grads)
        dskips[lvl] = dh[:, :n_skip]
        dh = upsample2_backward(uc, np.ascontiguousarray(dh[:, n_skip:]))

    for lvl in reversed(range(cfg.levels)):
        if lvl < cfg.levels - 1:
            dh = maxpool2_backward(pool_caches[lvl], dh)
            dh = dh + dskips[lvl]
        dh = _block_backward(params, enc_caches[lvl], dh, grads)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: UNetConfig, params: dict[str, np.ndarray]) -> None:
    """Binary checkpoint; parameters must be float32 for a bit-exact round trip."""
    for name, arr in params.items():
        if arr.dtype != np.float32:
            raise TypeError(f"checkpoint arrays must be float32, {name} is "
                            f"{arr.dtype}")
    header = {
        "format": 1,
        "config": asdict(cfg),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in params.items()],
    }
    blob = json.dumps(header).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[UNetConfig, dict[str, np.ndarray]]:
    with open(Path(path), "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise IOError(f"{path}: not a network checkpoint (bad magic)")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode())
        cfg = UNetConfig(**header["config"])
        params = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise IOError(f"{path}: truncated checkpoint")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
                shape).astype(np.float32)
        if fh.read(1):
            raise IOError(f"{path}: trailing bytes after checkpoint payload")
    return cfg, params
