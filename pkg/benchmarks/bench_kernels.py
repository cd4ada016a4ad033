#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Covers the hot paths: batched aggregation-head forward/backward and the
all-pairs haversine matrix. The numba timings exclude JIT compilation
(one warmup call per kernel).
"""

import argparse
import time

import numpy as np

from cvmix import _kernels_numpy as knp

try:
    from cvmix import _kernels_numba as knb
except ImportError:
    knb = None


def setup(m, n, s, L, hid, d, r, seed=0):
    rng = np.random.default_rng(seed)
    return dict(
        tokens=rng.normal(size=(m, n, s)),
        W1=rng.normal(size=(L, hid, n)) * 0.2,
        b1=rng.normal(size=(L, hid)) * 0.05,
        W2=rng.normal(size=(L, n, hid)) * 0.2,
        b2=rng.normal(size=(L, n)) * 0.05,
        Wd=rng.normal(size=(d, s)) * 0.2,
        Wr=rng.normal(size=(r, n)) * 0.2,
        upstream=rng.normal(size=(m, d * r)),
    )


def timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(label, kw, repeats):
    fargs = (kw["tokens"], kw["W1"], kw["b1"], kw["W2"], kw["b2"],
             kw["Wd"], kw["Wr"])
    rows = []

    _, X, A, Zp, v, nrm = knp.mixer_forward_batch(*fargs)
    bargs = (kw["upstream"], kw["W1"], kw["W2"], kw["Wd"], kw["Wr"],
             X, A, Zp, v, nrm)

    t_np_f = timed(lambda: knp.mixer_forward_batch(*fargs), repeats)
    t_np_b = timed(lambda: knp.mixer_backward_batch(*bargs), repeats)
    rows.append((f"forward  {label}", t_np_f, None))
    rows.append((f"backward {label}", t_np_b, None))
    if knb is not None:
        knb.mixer_forward_batch(*fargs)  # JIT warmup
        knb.mixer_backward_batch(*bargs)
        rows[0] = (rows[0][0], t_np_f, timed(lambda: knb.mixer_forward_batch(*fargs), repeats))
        rows[1] = (rows[1][0], t_np_b, timed(lambda: knb.mixer_backward_batch(*bargs), repeats))
    return rows


def bench_haversine(n, repeats):
    rng = np.random.default_rng(1)
    lat = rng.uniform(-60, 60, size=n)
    lon = rng.uniform(-179, 179, size=n)
    t_np = timed(lambda: knp.haversine_matrix(lat, lon, 6_371_000.0), repeats)
    t_nb = None
    if knb is not None:
        knb.haversine_matrix(lat, lon, 6_371_000.0)
        t_nb = timed(lambda: knb.haversine_matrix(lat, lon, 6_371_000.0), repeats)
    return [(f"haversine {n}x{n}", t_np, t_nb)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rows = []
    rows += bench_case("toy   (m=64,  n=64,  s=32)",
                       setup(64, 64, 32, 2, 64, 16, 4), args.repeats)
    rows += bench_case("base  (m=32,  n=256, s=768)",
                       setup(32, 256, 768, 2, 256, 64, 4), args.repeats)
    rows += bench_haversine(1000, args.repeats)
    rows += bench_haversine(4000, args.repeats)

    print(f"{'kernel':<36} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, t_np, t_nb in rows:
        if t_nb is None:
            print(f"{name:<36} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
        else:
            print(f"{name:<36} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
                  f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
