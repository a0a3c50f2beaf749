"""Compare the compiled kernels with the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Prints one row per kernel and size with the best-of-N wall time of each
backend, the speed ratio, and the largest absolute difference in output.
"""
import argparse
import time

import numpy as np

from ttrec.kernels import _fallback

try:
    from ttrec.kernels import _core
except ImportError:
    _core = None


def best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(rng):
    for n, k, d in ((1_000, 4, 64), (20_000, 4, 64), (100_000, 8, 64)):
        points, centers = rng.normal(size=(n, d)), rng.normal(size=(k, d))
        yield f"sq_dist_to_centers n={n} k={k} d={d}", "sq_dist_to_centers", (points, centers)
    for n, d in ((200, 64), (1_000, 64), (3_000, 64)):
        yield f"pairwise_sq_sum n={n} d={d}", "pairwise_sq_sum", (rng.normal(size=(n, d)),)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if _core is None:
        print("compiled kernels are not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<42}{'python s':>12}{'compiled s':>12}{'ratio':>8}{'max diff':>11}")
    for label, name, inputs in cases(rng):
        t_py, out_py = best_time(lambda: getattr(_fallback, name)(*inputs), args.repeats)
        if _core is None:
            print(f"{label:<42}{t_py:>12.5f}{'-':>12}{'-':>8}{'-':>11}")
            continue
        t_c, out_c = best_time(lambda: getattr(_core, name)(*inputs), args.repeats)
        print(f"{label:<42}{t_py:>12.5f}{t_c:>12.5f}{t_py / t_c:>8.2f}{max_diff(out_py, out_c):>11.2e}")


if __name__ == "__main__":
    main()
