#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Covers the two hot paths: 3-D convolution (forward and backward at the
shapes the default network actually runs) and the exact Euclidean
distance transform (evaluation-scale masks). Run after building the
extension:

    python3 benchmarks/bench_kernels.py [--full-scale]
"""

import argparse
import time

import numpy as np

from lesionprior import _kernels_np

try:
    from lesionprior import _core
except ImportError:
    _core = None


def best_of(fn, *args, reps=5):
    best = float("inf")
    for _ in range(reps):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def row(label, t_np, t_core):
    speedup = f"{t_np / t_core:5.1f}x" if t_core else "    —"
    core = f"{t_core * 1e3:9.1f}" if t_core else "        —"
    print(f"{label:<42} {t_np * 1e3:9.1f} {core} {speedup}")


def bench_conv(rng, n, c_in, c_out, size, ksize, pad, reps):
    x = rng.normal(size=(n, c_in, size, size, size)).astype(np.float32)
    k = (rng.normal(size=(c_out, c_in, ksize, ksize, ksize)) * 0.1).astype(
        np.float32)
    b = np.zeros(c_out, np.float32)
    dy = rng.normal(size=(n, c_out, size, size, size)).astype(np.float32)

    label = f"conv{ksize} {c_in:>2}->{c_out:<2} batch {n} @ {size}^3"
    t_np = best_of(_kernels_np.conv3d_forward, x, k, b, pad, reps=reps)
    t_c = (best_of(_core.conv3d_forward, x, k, b, pad, reps=reps)
           if _core else None)
    row(label + " fwd", t_np, t_c)

    t_np = best_of(_kernels_np.conv3d_backward, x, k, dy, pad, reps=reps)
    t_c = (best_of(_core.conv3d_backward, x, k, dy, pad, reps=reps)
           if _core else None)
    row(label + " bwd", t_np, t_c)


def bench_edt(rng, shape, density, reps):
    mask = rng.random(shape) < density
    spacing = (1.0, 1.0, 1.0)
    label = f"edt {shape[0]}x{shape[1]}x{shape[2]} ({density:.0%} set)"
    t_np = best_of(_kernels_np.edt_sq, mask, spacing, reps=reps)
    if _core:
        m8 = np.ascontiguousarray(mask, np.uint8)
        t_c = best_of(_core.edt_sq, m8, *spacing, reps=reps)
    else:
        t_c = None
    row(label, t_np, t_c)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--full-scale", action="store_true",
                        help="include one BraTS-sized (240x240x155) EDT run")
    parser.add_argument("--reps", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("note: compiled extension not available, numpy column only\n")
    print(f"{'kernel':<42} {'numpy ms':>9} {'compiled':>9} {'speedup':>7}")
    print("-" * 72)

    rng = np.random.default_rng(0)
    # first encoder layer and widest decoder layer of the default network
    bench_conv(rng, n=2, c_in=13, c_out=8, size=32, ksize=3, pad=1,
               reps=args.reps)
    bench_conv(rng, n=2, c_in=24, c_out=8, size=32, ksize=3, pad=1,
               reps=args.reps)
    bench_conv(rng, n=2, c_in=8, c_out=4, size=32, ksize=1, pad=0,
               reps=args.reps)
    bench_edt(rng, (64, 64, 64), 0.02, args.reps)
    if args.full_scale:
        bench_edt(rng, (240, 240, 155), 0.002, max(1, args.reps // 2))


if __name__ == "__main__":
    main()
