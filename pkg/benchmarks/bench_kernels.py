#!/usr/bin/env python3
"""Compare the numba kernels against the pure-numpy fallback.

Times every hot kernel at several sizes plus a full mask expansion, and
prints a table with the speedup. The numba functions are compiled once
before timing so JIT cost does not pollute the numbers.

Usage: python benchmarks/bench_kernels.py [--sizes 1000,100000,1000000]
"""

import argparse
import time

import numpy as np

from bufsecagg import _kernels_numpy as knp

try:
    from bufsecagg import _kernels_numba as knb
except ImportError:
    knb = None

Q = (1 << 31) - 1


def timeit(fn, *args, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, np_call, nb_call):
    t_np = timeit(*np_call)
    if nb_call is None:
        print(f"{name:<28} numpy {t_np * 1e3:9.3f} ms   numba       n/a")
        return
    t_nb = timeit(*nb_call)
    print(
        f"{name:<28} numpy {t_np * 1e3:9.3f} ms   numba {t_nb * 1e3:9.3f} ms"
        f"   speedup {t_np / t_nb:6.2f}x"
    )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="10000,100000,1000000",
                        help="comma-separated element counts")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    rng = np.random.default_rng(0)
    if knb is not None:
        # warm the JIT cache outside the timed region
        warm = rng.integers(0, Q, size=16, dtype=np.int64)
        knb.mod_add(warm, warm, Q)
        knb.mod_sub(warm, warm, Q)
        knb.mod_scale(warm, 3, Q)
        knb.signed_lift(warm, Q)
        knb.take_below(warm.astype(np.uint32), (1 << 32) // Q * Q, Q,
                       np.empty(16, np.int64), 0)
        knb.quantize_stochastic(rng.normal(size=16), 100.0, 65536.0, rng.random(16), Q)

    print(f"modulus = {Q}, best of 7 runs\n")
    for n in sizes:
        a = rng.integers(0, Q, size=n, dtype=np.int64)
        b = rng.integers(0, Q, size=n, dtype=np.int64)
        words = rng.integers(0, 1 << 32, size=n, dtype=np.uint64).astype(np.uint32)
        x = rng.normal(scale=50.0, size=n)
        u = rng.random(n)
        out = np.empty(n, np.int64)
        limit = (1 << 32) // Q * Q

        print(f"-- n = {n:,}")
        bench_case("mod_add", (knp.mod_add, a, b, Q),
                   None if knb is None else (knb.mod_add, a, b, Q))
        bench_case("mod_sub", (knp.mod_sub, a, b, Q),
                   None if knb is None else (knb.mod_sub, a, b, Q))
        bench_case("take_below (rejection)", (knp.take_below, words, limit, Q, out, 0),
                   None if knb is None else (knb.take_below, words, limit, Q, out, 0))
        bench_case("quantize_stochastic", (knp.quantize_stochastic, x, 100.0, 65536.0, u, Q),
                   None if knb is None else (knb.quantize_stochastic, x, 100.0, 65536.0, u, Q))
        bench_case("signed_lift", (knp.signed_lift, a, Q),
                   None if knb is None else (knb.signed_lift, a, Q))
        print()


if __name__ == "__main__":
    main()
