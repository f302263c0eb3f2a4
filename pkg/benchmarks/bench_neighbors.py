"""Time the compiled and pure-numpy hash-grid kernels on labeling-sized workloads.

    python3 benchmarks/bench_neighbors.py [--repeat 3]

Both backends must return identical distances and indices; the script
checks that before reporting times.
"""
import argparse
import time

import numpy as np

from mcc.neighbors import BACKEND, nearest, radius_grid

CASES = [
    # (name, n points, n queries, radius)
    ("label 128 queries", 120_000, 128, 0.1),
    ("label batch of 32", 120_000, 4096, 0.1),
    ("metrics 0.2 grid", 6_000, 28_000, 0.1),
    ("chamfer", 6_000, 6_000, None),
]


def _run(backend, pts, q, radius):
    if radius is None:
        return nearest(q, pts, backend=backend)
    return radius_grid(pts, radius, backend=backend).nearest_within(q, radius)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if BACKEND != "cython":
        print("compiled extension not built; only the numpy backend is available")
    backends = ["numpy"] + (["cython"] if BACKEND == "cython" else [])
    rng = np.random.default_rng(0)
    print(f"{'case':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, n, m, radius in CASES:
        pts = rng.normal(size=(n, 3))
        q = rng.uniform(-3, 3, (m, 3))
        results, times = {}, {}
        for b in backends:
            best = float("inf")
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                results[b] = _run(b, pts, q, radius)
                best = min(best, time.perf_counter() - t0)
            times[b] = best
        if len(backends) == 2:
            for a, c in zip(results["numpy"], results["cython"]):
                assert np.array_equal(a, c), f"{name}: backends disagree"
        row = f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.1f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{times['numpy'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
