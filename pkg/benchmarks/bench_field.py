"""Compare the compiled and numpy field kernels.

    python3 benchmarks/bench_field.py [--repeat 5]

Prints the best-of-``repeat`` wall time per configuration and the speedup of
the compiled kernel, after checking that both agree.
"""

import argparse
import time

import numpy as np

from pfjm import _field_py

try:
    from pfjm import _field_kernel
except ImportError:
    _field_kernel = None

# (query points, charges, data dimension N, augmented dimension D)
CASES = [
    (2000, 200, 2, 128),
    (64, 200, 2, 128),
    (16, 64, 768, 128),
    (4, 16, 12288, 128),
]


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _field_kernel is None:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    print(f"{'P':>6} {'M':>5} {'N':>6} {'D':>5} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for P, M, N, D in CASES:
        X = rng.standard_normal((P, N))
        r = rng.uniform(0.05, 5.0, P)
        Y = rng.standard_normal((M, N))
        logw = np.full(M, -np.log(M))
        a = _field_py.field_batch(X, r, Y, logw, D)
        b = _field_kernel.field_batch(X, r, Y, logw, D)
        ratio_a = a[0] / a[1][:, None]
        ratio_b = b[0] / b[1][:, None]
        np.testing.assert_allclose(ratio_b, ratio_a, rtol=1e-9, atol=1e-12)
        t_py = best_time(_field_py.field_batch, (X, r, Y, logw, D), args.repeat)
        t_cy = best_time(_field_kernel.field_batch, (X, r, Y, logw, D), args.repeat)
        print(f"{P:>6} {M:>5} {N:>6} {D:>5} {1e3 * t_py:>10.2f} {1e3 * t_cy:>10.2f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
