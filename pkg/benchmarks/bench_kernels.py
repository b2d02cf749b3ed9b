#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--repeats N]

The active path in the package is selected at import time from the
DCLIMBA_NUMBA environment variable; this script times both variants
side by side regardless of the selection.
"""

import argparse
import time

import numpy as np

from dclimba import _kernels as K


def timeit(fn, *args, repeats=10):
    fn(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def row(name, t_np, t_nb):
    speedup = t_np / t_nb if t_nb > 0 else float("inf")
    print(f"{name:<24} numpy {t_np * 1e3:9.2f} ms   numba {t_nb * 1e3:9.2f} ms"
          f"   numba speedup {speedup:5.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()

    if not K.USE_NUMBA:
        raise SystemExit("numba path unavailable (DCLIMBA_NUMBA=0 or numba "
                         "missing); nothing to compare")

    rng = np.random.default_rng(0)
    print(f"active path: {'numba' if K.USE_NUMBA else 'numpy'}; "
          f"repeats={args.repeats} (best-of shown)\n")

    # conv1d at training-batch size: 5 patches x 17 nodes, 64 channels, 365 days
    B, cin, cout, T, k = 85, 64, 64, 365, 3
    xpad = rng.standard_normal((B, cin, T + k - 1))
    w = rng.standard_normal((cout, cin, k))
    b = rng.standard_normal(cout)
    gy = rng.standard_normal((B, cout, T))
    row("conv1d forward",
        timeit(K.conv1d_forward_np, xpad, w, b, repeats=args.repeats),
        timeit(K.conv1d_forward_nb, xpad, w, b, repeats=args.repeats))
    row("conv1d backward input",
        timeit(K.conv1d_backward_input_np, gy, w, repeats=args.repeats),
        timeit(K.conv1d_backward_input_nb, gy, w, repeats=args.repeats))
    row("conv1d backward weight",
        timeit(K.conv1d_backward_weight_np, gy, xpad, repeats=args.repeats),
        timeit(K.conv1d_backward_weight_nb, gy, xpad, repeats=args.repeats))

    flags = rng.random((1000, 365)) < 0.45
    row("run_length_max (1000y)",
        timeit(K.run_length_max_np, flags, repeats=args.repeats),
        timeit(K.run_length_max_nb, flags, repeats=args.repeats))

    mask = (rng.random((256, 256)) < 0.5).astype(np.uint8)
    def boxes_np(m):
        return [K.box_partial_count_np(m, s) for s in (2, 4, 8, 16, 32, 64)]
    def boxes_nb(m):
        return [K.box_partial_count_nb(m, s) for s in (2, 4, 8, 16, 32, 64)]
    row("box_count 256^2 x6 sizes",
        timeit(boxes_np, mask, repeats=args.repeats),
        timeit(boxes_nb, mask, repeats=args.repeats))

    la1, lo1 = rng.uniform(-60, 60, 400), rng.uniform(-120, 120, 400)
    row("pairwise_haversine 400^2",
        timeit(K.pairwise_haversine_np, la1, lo1, la1, lo1, repeats=args.repeats),
        timeit(K.pairwise_haversine_nb, la1, lo1, la1, lo1, repeats=args.repeats))


if __name__ == "__main__":
    main()
