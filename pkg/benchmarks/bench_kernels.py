"""Benchmark the numba kernels against the pure-numpy fallback.

Times the five hot kernels on training-shaped arrays plus one full
training step per backend.  Run:

    python benchmarks/bench_kernels.py [--repeats N]

The first numba call compiles (cached under __pycache__); compile time
is excluded by a warmup pass.
"""

import argparse
import time

import numpy as np

from decalcify import _kernels_numba as knb
from decalcify import _kernels_numpy as knp


def pad(x, p=1):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def bench(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def conv_cases():
    # batch 3, desk-scale widths at training patch resolution
    rng = np.random.default_rng(0)
    n, ci, co, s, k = 3, 8, 4, 24, 3
    x = rng.standard_normal((n, ci, s, s, s)).astype(np.float32)
    w = rng.standard_normal((co, ci, k, k, k)).astype(np.float32)
    b = rng.standard_normal(co).astype(np.float32)
    xp = pad(x)
    out = np.empty((n, co, s, s, s), dtype=np.float32)
    gout = rng.standard_normal(out.shape).astype(np.float32)
    macs = n * co * s ** 3 * ci * k ** 3
    return xp, w, b, out, gout, macs


def pool_cases():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 8, 24, 24, 24)).astype(np.float32)
    out = np.empty((3, 8, 12, 12, 12), dtype=np.float32)
    argmax = np.empty(out.shape, dtype=np.int64)
    gout = rng.standard_normal(out.shape).astype(np.float32)
    return x, out, argmax, gout


def run_kernels(repeats):
    xp, w, b, out, gout, macs = conv_cases()
    x, pout, argmax, pgout = pool_cases()
    rows = []
    for name, mod in (("numba", knb), ("numpy", knp)):
        mod.conv3d_forward(xp, w, b, 1, out)  # warmup / compile
        mod.conv3d_backward_input(gout, w, 1, np.zeros_like(xp))
        mod.conv3d_backward_weights(gout, xp, 1, np.zeros_like(w),
                                    np.zeros_like(b))
        mod.maxpool3d_forward(x, pout, argmax)
        mod.maxpool3d_backward(pgout, argmax, np.zeros_like(x))
        rows.append((
            name,
            bench(mod.conv3d_forward, (xp, w, b, 1, out), repeats),
            bench(lambda: mod.conv3d_backward_input(
                gout, w, 1, np.zeros_like(xp)), (), repeats),
            bench(lambda: mod.conv3d_backward_weights(
                gout, xp, 1, np.zeros_like(w), np.zeros_like(b)), (), repeats),
            bench(mod.maxpool3d_forward, (x, pout, argmax), repeats),
            bench(lambda: mod.maxpool3d_backward(
                pgout, argmax, np.zeros_like(x)), (), repeats),
        ))
    print(f"{'backend':8s} {'conv_fwd':>10s} {'conv_bwd_in':>12s} "
          f"{'conv_bwd_w':>11s} {'pool_fwd':>9s} {'pool_bwd':>9s}")
    for name, f, bi, bw, pf, pb in rows:
        print(f"{name:8s} {f * 1e3:8.2f}ms {bi * 1e3:10.2f}ms "
              f"{bw * 1e3:9.2f}ms {pf * 1e3:7.2f}ms {pb * 1e3:7.2f}ms")
    f_nb = rows[0][1]
    print(f"\nconv forward: {macs / f_nb / 1e9:.2f} GMAC/s (numba), "
          f"numpy/numba speed ratio {rows[1][1] / f_nb:.2f}x")


def run_training_step(repeats):
    import os
    from decalcify.ctvol import RegionOfInterest, Volume
    from decalcify.trainer import TrainingConfig, build_dataset, train

    rng = np.random.default_rng(2)
    vol = Volume(rng.integers(-200, 500, (48, 48, 48)).astype(np.int16))
    ds = build_dataset([vol], RegionOfInterest((48, 48, 48)), 24, 12,
                       include_flips=False, mask_size=16)
    cfg = TrainingConfig(steps=max(3, repeats), seed=0, lr=1e-3, mask_size=16)
    t0 = time.perf_counter()
    train(cfg, ds)
    per = (time.perf_counter() - t0) / cfg.steps
    backend = os.environ.get("DECALCIFY_BACKEND", "auto")
    print(f"full training step (backend={backend}): {per * 1e3:.0f} ms")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    run_kernels(args.repeats)
    run_training_step(args.repeats)
