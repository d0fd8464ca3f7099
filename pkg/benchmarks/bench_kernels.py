#!/usr/bin/env python3
"""Benchmark the jitted hot kernels against their pure numpy/Python fallbacks.

Usage: python benchmarks/bench_kernels.py [--accesses N] [--repeat R]

The same kernels are selected at import time by the PAGESCOPE_PURE_NUMPY
environment variable; here both variants are imported explicitly so one run
compares them side by side and verifies they agree.
"""

import argparse
import time

import numpy as np

from pagescope import _kernels


def timeit(fn, *args, repeat=3):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--accesses", type=int, default=2_000_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.RandomState(7)
    pages = rng.randint(0, 4096, size=args.accesses).astype(np.int64)
    values = np.zeros(1_000_000, dtype=np.float64)
    idx = rng.randint(0, values.size, size=args.accesses).astype(np.int64)

    rows = []
    if _kernels.HAS_NUMBA:
        # Warm the JIT outside the timed region.
        _kernels.lru_misses_numba(pages[:16], 1, 48)
        _kernels.fill_sum_trace_numba(values, idx[:16], 1.0)
        _kernels.sum_trace_numba(values, idx[:16])

    for sets, ways in ((1, 48), (12, 4)):
        t_py, m_py = timeit(_kernels.lru_misses_numpy, pages, sets, ways,
                            repeat=args.repeat)
        row = [f"lru {sets}x{ways}", t_py, None, m_py]
        if _kernels.HAS_NUMBA:
            t_nb, m_nb = timeit(_kernels.lru_misses_numba, pages, sets, ways,
                                repeat=args.repeat)
            assert m_nb == m_py, "kernel variants disagree"
            row[2] = t_nb
        rows.append(row)

    t_py, s_py = timeit(_kernels.fill_sum_trace_numpy, values, idx, 1.0,
                        repeat=args.repeat)
    row = ["fill+sum", t_py, None, s_py]
    if _kernels.HAS_NUMBA:
        t_nb, s_nb = timeit(_kernels.fill_sum_trace_numba, values, idx, 1.0,
                            repeat=args.repeat)
        assert s_nb == s_py
        row[2] = t_nb
    rows.append(row)

    t_py, s_py = timeit(_kernels.sum_trace_numpy, values, idx,
                        repeat=args.repeat)
    row = ["gather sum", t_py, None, s_py]
    if _kernels.HAS_NUMBA:
        t_nb, s_nb = timeit(_kernels.sum_trace_numba, values, idx,
                            repeat=args.repeat)
        assert s_nb == s_py
        row[2] = t_nb
    rows.append(row)

    print(f"{args.accesses} accesses, best of {args.repeat}")
    print(f"{'kernel':<12}{'numpy/python':>14}{'numba':>12}{'speedup':>9}")
    for name, t_py, t_nb, _ in rows:
        if t_nb is None:
            print(f"{name:<12}{t_py * 1e3:>12.1f}ms{'n/a':>12}{'n/a':>9}")
        else:
            print(f"{name:<12}{t_py * 1e3:>12.1f}ms{t_nb * 1e3:>10.1f}ms"
                  f"{t_py / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
