"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel and backend, the speedup, and
whether both backends returned identical arrays.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from vecfl import _kernels


def cases(rng):
    n_obj = 400
    cx, cy = rng.uniform(-100, 100, n_obj), rng.uniform(-100, 100, n_obj)
    rad = rng.uniform(0.3, 2.0, n_obj)
    yield "wedge_visibility", (0.0, 0.0, 1.0, 0.0, np.cos(np.pi / 3), False, 80.0**2, cx, cy, rad)

    ex, ey = rng.uniform(-100, 100, 20000), rng.uniform(-100, 100, 20000)
    px, py = rng.uniform(-100, 100, 60), rng.uniform(-100, 100, 60)
    r2 = np.full(60, 30.0**2)
    yield "count_within", (px, py, r2, ex, ey)
    yield "cover_matrix", (px, py, r2, ex, ey)

    cover = _kernels.fallback.cover_matrix(px, py, r2, ex[:3000], ey[:3000])
    weight = rng.integers(1, 5, 3000).astype(np.int64)
    cost = rng.uniform(0.5, 2.0, 60)
    group = np.arange(60, dtype=np.int64) // 2
    yield "greedy_cover", (cover, weight, cost, group, 10.0, True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels.compiled is None:
        print("compiled core not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, call_args in cases(rng):
        py_fn = getattr(_kernels.fallback, name)
        cy_fn = getattr(_kernels.compiled, name)
        t_py = min(timeit.repeat(lambda: py_fn(*call_args), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: cy_fn(*call_args), number=1, repeat=args.repeat))
        same = np.array_equal(np.asarray(py_fn(*call_args)), np.asarray(cy_fn(*call_args)))
        print(f"{name:<18}{t_py * 1e3:>12.3f}{t_cy * 1e3:>12.3f}{t_py / t_cy:>10.1f}  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
