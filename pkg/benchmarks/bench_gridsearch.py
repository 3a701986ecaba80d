"""Benchmark the compiled grid-scan kernel against the NumPy fallback.

Run: python benchmarks/bench_gridsearch.py [--step 2e-3] [--workers 1]
The compiled backend must produce bit-identical results; the table reports
wall time per instance and the speedup.
"""

import argparse
import time

import numpy as np

from twophase import _gridpure, gridsearch

try:
    from twophase import _gridcore
except ImportError:
    _gridcore = None


def make_instance(rng, k):
    cv = rng.uniform(0.2, 3.0, k)
    cb = rng.uniform(0.2, 3.0, k)
    lam = rng.uniform(0.05, 0.95, k)
    return cv, cb, float(np.sum(cb * lam))


def time_backend(backend, cv, cb, remaining, step, workers, repeats=3):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = gridsearch.min_variance_on_budget_surface(
            cv, cb, remaining, step=step, workers=workers, backend=backend
        )
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--step", type=float, default=2e-3)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if _gridcore is None:
        print("compiled kernel unavailable; benchmarking the fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"step={args.step} workers={args.workers}")
    print(f"{'K':>3} {'points':>12} {'numpy (s)':>10} {'cython (s)':>11} {'speedup':>8}")
    m = int(round(1.0 / args.step))
    for k in (2, 3, 4):
        cv, cb, remaining = make_instance(rng, k)
        t_np, r_np = time_backend(_gridpure, cv, cb, remaining, args.step, args.workers)
        if _gridcore is not None:
            t_cy, r_cy = time_backend(_gridcore, cv, cb, remaining, args.step, args.workers)
            assert r_cy.value == r_np.value, "backends disagree"
            assert np.array_equal(r_cy.lambda2, r_np.lambda2)
            print(f"{k:>3} {m ** (k - 1):>12,} {t_np:>10.4f} {t_cy:>11.4f} "
                  f"{t_np / t_cy:>7.1f}x")
        else:
            print(f"{k:>3} {m ** (k - 1):>12,} {t_np:>10.4f} {'-':>11} {'-':>8}")


if __name__ == "__main__":
    main()
