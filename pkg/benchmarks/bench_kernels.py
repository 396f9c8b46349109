"""Time every kernel on each available backend.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--seed S]
"""

import argparse
import timeit

import numpy as np

from lidarloc.kernels import available_backends


def workloads(seed):
    rng = np.random.default_rng(seed)
    az = np.linspace(-np.pi, np.pi, 720, endpoint=False)
    ring = np.column_stack([20 * np.cos(az), 20 * np.sin(az), np.full(az.size, -1.0)])
    ring += rng.normal(scale=0.01, size=ring.shape)
    n = 50_000
    pairs = rng.integers(0, n, size=(100_000, 2))
    pts = rng.uniform(-20, 20, size=(200_000, 3))
    keys = np.floor(pts / 0.1).astype(np.int64)
    return {
        "line_smoothness (720 pts x 48 lines)": lambda k: [k.line_smoothness(ring, 5) for _ in range(48)],
        "connected_components (50k nodes, 100k edges)": lambda k: k.connected_components(n, pairs),
        "voxel_mean (200k pts)": lambda k: k.voxel_mean(pts, keys),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    for name, fn in workloads(args.seed).items():
        row = []
        for bname, mod in backends.items():
            best = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
            row.append(f"{bname} {best * 1e3:8.2f} ms")
        print(f"{name:48s} " + "  ".join(row))


if __name__ == "__main__":
    main()
