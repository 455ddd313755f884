"""Training: mined cross-entropy loss, Adam/AMSGrad, loop, and prediction.

The loss selects every lesion voxel plus the hardest background voxels,
capped at ``neg_pos_ratio`` times the lesion count, and averages
cross-entropy over the selection. The optimizer is Adam with coupled L2
weight decay and the AMSGrad running maximum of the bias-corrected second
moment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import unet
from .preprocess import MultiChannelVolume

# class index <-> BraTS label code
CLASS_TO_CODE = np.array([0, 1, 2, 4], dtype=np.uint8)
CODE_TO_CLASS = {0: 0, 1: 1, 2: 2, 4: 3}


@dataclass
class TrainConfig:
    patch_size: tuple[int, int, int] = (128, 128, 128)
    batch_size: int = 2
    epochs: int = 300
    lr0: float = 1e-3
    weight_decay: float = 1e-4
    neg_pos_ratio: int = 3
    seed: int = 0
    lr_mode: str = "normalized"

    def __post_init__(self):
        if isinstance(self.patch_size, int):
            self.patch_size = (self.patch_size,) * 3
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if min(self.patch_size) < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("patch_size, batch_size, epochs must be positive")
        if self.lr0 <= 0 or self.weight_decay < 0:
            raise ValueError("lr0 must be > 0 and weight_decay >= 0")
        if self.neg_pos_ratio < 1:
            raise ValueError("neg_pos_ratio must be >= 1")
        if self.lr_mode not in ("normalized", "literal"):
            raise ValueError(f"lr_mode must be normalized or literal, "
                             f"got {self.lr_mode!r}")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        if "patch_size" in raw and isinstance(raw["patch_size"], list):
            raw["patch_size"] = tuple(raw["patch_size"])
        return cls(**raw)


@dataclass
class TrainCase:
    """One subject ready for training: fused channels + class-index labels."""

    case_id: str
    channels: np.ndarray  # (C, dx, dy, dz) float32
    labels: np.ndarray    # (dx, dy, dz) int8 class indices


def labels_to_classes(gt_data: np.ndarray) -> np.ndarray:
    """BraTS codes {0,1,2,4} -> contiguous class indices {0,1,2,3}."""
    out = np.zeros(gt_data.shape, dtype=np.int8)
    for code, cls in CODE_TO_CLASS.items():
        out[gt_data == code] = cls
    known = np.isin(gt_data, list(CODE_TO_CLASS))
    if not known.all():
        bad = np.unique(gt_data[~known])
        raise ValueError(f"unknown ground-truth codes {bad.tolist()}")
    return out


def make_case(case_id: str, fused: MultiChannelVolume,
              gt_data: np.ndarray) -> TrainCase:
    if fused.data.shape[1:] != gt_data.shape:
        raise ValueError("channels and ground truth differ in shape")
    return TrainCase(case_id, fused.data.astype(np.float32),
                     labels_to_classes(gt_data))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def hard_negative_ce(logits: np.ndarray, targets: np.ndarray,
                     neg_pos_ratio: int = 3):
    """Cross-entropy over lesion voxels plus the hardest background voxels.

    Selection: all positives (target != 0) plus the top
    ``min(neg_pos_ratio * n_pos, n_neg)`` negatives ranked by per-voxel
    cross-entropy (ties broken by voxel order). When a batch has no
    positive voxel, the hardest ceil(1% of all voxels) negatives are used
    so the step still carries signal.

    Returns ``(loss, dlogits)``; dlogits is zero outside the selection and
    (softmax - onehot) / |selection| inside.
    """
    if logits.shape[0] != targets.shape[0] or logits.shape[2:] != targets.shape[1:]:
        raise ValueError(f"logits {logits.shape} do not match targets "
                         f"{targets.shape}")
    n_classes = logits.shape[1]
    logp = _log_softmax(logits.astype(np.float64))
    onehot_idx = np.expand_dims(targets.astype(np.int64), 1)
    ce = -np.take_along_axis(logp, onehot_idx, axis=1)[:, 0]  # (N, D, H, W)

    flat_ce = ce.ravel()
    flat_pos = (targets != 0).ravel()
    n_pos = int(flat_pos.sum())
    n_neg = flat_pos.size - n_pos

    selected = flat_pos.copy()
    if n_pos > 0:
        k = min(neg_pos_ratio * n_pos, n_neg)
    else:
        k = min(math.ceil(0.01 * flat_pos.size), n_neg)
    if k > 0:
        neg_idx = np.flatnonzero(~flat_pos)
        order = np.argsort(-flat_ce[neg_idx], kind="stable")
        selected[neg_idx[order[:k]]] = True

    n_sel = int(selected.sum())
    if n_sel == 0:
        raise ValueError("loss selection is empty")
    loss = float(flat_ce[selected].sum() / n_sel)

    probs = np.exp(logp)
    np.put_along_axis(probs, onehot_idx, np.take_along_axis(probs, onehot_idx,
                                                            axis=1) - 1.0, axis=1)
    sel_mask = selected.reshape(targets.shape)
    dlogits = probs * np.expand_dims(sel_mask, 1) / n_sel
    return loss, dlogits.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    vmax: dict[str, np.ndarray]
    t: int = 0


def init_opt_state(params: dict[str, np.ndarray]) -> OptState:
    def zeros():
        return {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()}

    return OptState(m=zeros(), v=zeros(), vmax=zeros())


def adam_amsgrad_step(params, grads, state: OptState, lr,
                      weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One optimizer step; mutates params and state in place and returns them."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        if weight_decay:
            g = g + weight_decay * p  # coupled L2 penalty
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        vhat = v / bc2
        np.maximum(state.vmax[name], vhat, out=state.vmax[name])
        step = lr * (m / bc1) / (np.sqrt(state.vmax[name]) + eps)
        p -= step.astype(p.dtype)
    return params, state


def lr_schedule(epoch: int, lr0: float = 1e-3, total_epochs: int = 300,
                mode: str = "normalized") -> float:
    """Decay 0.1^x of the base rate; x = epoch/total ("normalized") or the
    raw epoch number ("literal")."""
    if mode == "normalized":
        return lr0 * 0.1 ** (epoch / total_epochs)
    if mode == "literal":
        return lr0 * 0.1 ** epoch
    raise ValueError(f"unknown lr mode {mode!r}")


# ---------------------------------------------------------------------------
# Patch sampling and the loop
# ---------------------------------------------------------------------------

def sample_patch(channels: np.ndarray, labels: np.ndarray,
                 size: Sequence[int], rng) -> tuple[np.ndarray, np.ndarray]:
    """Random axis-aligned crop, identical across channels and labels."""
    dims = channels.shape[1:]
    size = tuple(int(s) for s in size)
    if any(s > d for s, d in zip(size, dims)):
        raise ValueError(f"patch {size} larger than volume {dims}")
    corner = [int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims)]
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    return channels[(slice(None), *sl)], labels[sl]


def train_loop(cases: Sequence[TrainCase], config: TrainConfig,
               net_config: unet.UNetConfig | None = None):
    """Train on one random patch per subject per epoch.

    Returns ``(params, history)`` with history rows (epoch, lr, mean loss).
    Deterministic for a fixed config seed. Raises on non-finite loss.
    """
    if not cases:
        raise ValueError("no training cases")
    n_channels = cases[0].channels.shape[0]
    for c in cases:
        if c.channels.shape[0] != n_channels:
            raise ValueError(f"case {c.case_id} has {c.channels.shape[0]} "
                             f"channels, expected {n_channels}")
    if net_config is None:
        net_config = unet.UNetConfig(in_channels=n_channels)
    elif net_config.in_channels != n_channels:
        raise ValueError(f"network expects {net_config.in_channels} channels, "
                         f"data has {n_channels}")

    rng = np.random.default_rng(config.seed)
    params = unet.init_params(net_config, seed=config.seed)
    state = init_opt_state(params)
    history = []

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.lr0, config.epochs, config.lr_mode)
        order = rng.permutation(len(cases))
        patches = [sample_patch(cases[i].channels, cases[i].labels,
                                config.patch_size, rng) for i in order]
        losses = []
        for start in range(0, len(patches), config.batch_size):
            chunk = patches[start:start + config.batch_size]
            x = np.stack([p[0] for p in chunk])
            y = np.stack([p[1] for p in chunk])
            logits, cache = unet.forward(net_config, params, x, train=True,
                                         rng=rng)
            loss, dlogits = hard_negative_ce(logits, y, config.neg_pos_ratio)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss={loss} at epoch {epoch}, "
                    f"batch {start // config.batch_size}")
            grads = unet.backward(net_config, params, cache, dlogits)
            adam_amsgrad_step(params, grads, state, lr, config.weight_decay)
            losses.append(loss)
        history.append((epoch, lr, float(np.mean(losses))))
    return params, history


def write_history_csv(history, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in history:
            writer.writerow([epoch, f"{lr:.10g}", f"{loss:.10g}"])


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _pad_to_divisor(x: np.ndarray, div: int):
    dims = x.shape[2:]
    padded = [(0, (-d) % div) for d in dims]
    if any(p[1] for p in padded):
        x = np.pad(x, [(0, 0), (0, 0), *padded])
    return x, dims


def predict_probs(net_config: unet.UNetConfig, params,
                  channels: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a (C, dx, dy, dz) input."""
    if channels.shape[0] != net_config.in_channels:
        raise ValueError(f"checkpoint expects {net_config.in_channels} "
                         f"channels, input has {channels.shape[0]}")
    x = channels[None].astype(np.float32)
    x, dims = _pad_to_divisor(x, net_config.spatial_divisor)
    logits, _ = unet.forward(net_config, params, x, train=False)
    logits = logits[0, :, :dims[0], :dims[1], :dims[2]].astype(np.float64)
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


def predict(net_config: unet.UNetConfig, params,
            channels: np.ndarray) -> np.ndarray:
    """Per-voxel argmax prediction mapped back to BraTS label codes."""
    probs = predict_probs(net_config, params, channels)
    return CLASS_TO_CODE[probs.argmax(axis=0)]


def ensemble_predict(members: Sequence[tuple[unet.UNetConfig, dict]],
                     channels: np.ndarray) -> np.ndarray:
    """Average member softmax maps, then argmax (ties -> lowest class)."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    ref_cfg = members[0][0]
    for cfg, _ in members[1:]:
        if cfg != ref_cfg:
            raise ValueError("ensemble members have differing descriptors")
    mean = None
    for cfg, params in members:
        p = predict_probs(cfg, params, channels)
        mean = p if mean is None else mean + p
    mean /= len(members)
    return CLASS_TO_CODE[mean.argmax(axis=0)]
