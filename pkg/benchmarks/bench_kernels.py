"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 20000]
"""
import argparse
import time

import numpy as np

from slamformer import _numba
from slamformer.kernels import (
    nearest_neighbors_numba, nearest_neighbors_numpy, weighted_median_numba, weighted_median_numpy,
    zbuffer_numba, zbuffer_numpy,
)


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=20000)
    args = ap.parse_args()
    if not _numba.HAVE_NUMBA:
        raise SystemExit("numba is unavailable (or disabled); nothing to compare")
    rng = np.random.default_rng(0)
    n = args.size
    pts, qs = rng.normal(size=(n, 3)), rng.normal(size=(n // 4, 3))
    u, v = rng.integers(0, 640, n * 10), rng.integers(0, 480, n * 10)
    depth = rng.uniform(0.1, 5.0, n * 10)
    vals, w = rng.normal(size=n * 10), rng.uniform(size=n * 10)
    cases = [
        ("nearest_neighbors", lambda: nearest_neighbors_numba(qs, pts), lambda: nearest_neighbors_numpy(qs, pts)),
        ("zbuffer", lambda: zbuffer_numba(u, v, depth, 480, 640), lambda: zbuffer_numpy(u, v, depth, 480, 640)),
        ("weighted_median", lambda: weighted_median_numba(vals, w), lambda: weighted_median_numpy(vals, w)),
    ]
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fast, slow in cases:
        a, b = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<18} {a * 1e3:10.2f} {b * 1e3:10.2f} {b / a:8.1f}")


if __name__ == "__main__":
    main()
