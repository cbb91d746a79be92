"""Time the compiled special-function kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from ptsr import _kernels_py

try:
    from ptsr import _kernels
except ImportError:
    _kernels = None


def bench(fn, x, repeat):
    out = np.empty_like(x)
    return min(timeit.repeat(lambda: fn(x, out), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    # softplus of N(0.5, 0.02) sits near 1; include a wide tail too
    x = np.concatenate([rng.uniform(0.05, 3.0, args.n // 2), rng.uniform(0.05, 200.0, args.n - args.n // 2)])

    print(f"n={args.n}, best of {args.repeat}")
    print(f"{'kernel':<10}{'numpy (ms)':>12}{'compiled (ms)':>15}{'speedup':>10}")
    for name in ("lgamma", "digamma", "trigamma"):
        py = bench(getattr(_kernels_py, name), x, args.repeat) * 1e3
        if _kernels is None:
            print(f"{name:<10}{py:>12.1f}{'n/a':>15}{'':>10}")
            continue
        c = bench(getattr(_kernels, name), x, args.repeat) * 1e3
        print(f"{name:<10}{py:>12.1f}{c:>15.1f}{py / c:>9.1f}x")


if __name__ == "__main__":
    main()
