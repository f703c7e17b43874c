"""Throughput comparison of the numba and numpy bilinear kernels.

Times each public kernel (forward gather, grid scatter backward, point
gradient backward) on a workload shaped like one deformable-attention
layer: N = H*W*heads*points sample locations against an [H,W,C] grid.
The numba path is warmed once before timing so JIT compilation does not
count against it.

Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --h 128 --w 128 --channels 64
"""

import argparse
import time

import numpy as np

from bevfuse import kernels


def _timeit(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h", type=int, default=64)
    ap.add_argument("--w", type=int, default=64)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--points", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not kernels.USE_NUMBA:
        raise SystemExit(
            "numba path disabled (BEVFUSE_NUMBA=0 or numba missing); "
            "nothing to compare"
        )

    rng = np.random.default_rng(args.seed)
    h, w, c = args.h, args.w, args.channels
    n = h * w * args.heads * args.points
    grid = rng.standard_normal((h, w, c))
    # spill a little past the border so the zero-padding branch is exercised
    ys = rng.uniform(-1.5, h + 0.5, n)
    xs = rng.uniform(-1.5, w + 0.5, n)
    gout = rng.standard_normal((n, c))

    cases = [
        (
            "sample_forward",
            kernels.sample_forward_jit,
            kernels.sample_forward_numpy,
            (grid, ys, xs),
        ),
        (
            "sample_backward_grid",
            kernels.sample_backward_grid_jit,
            kernels.sample_backward_grid_numpy,
            (gout, ys, xs, h, w),
        ),
        (
            "sample_backward_points",
            kernels.sample_backward_points_jit,
            kernels.sample_backward_points_numpy,
            (grid, gout, ys, xs),
        ),
    ]

    print(f"grid {h}x{w}x{c}, {n} sample points, best of {args.repeats}")
    print(f"{'kernel':<24} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name, jit_fn, np_fn, fn_args in cases:
        ref = jit_fn(*fn_args)  # warmup compile
        got = np_fn(*fn_args)
        ref = ref if isinstance(ref, tuple) else (ref,)
        got = got if isinstance(got, tuple) else (got,)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(np.asarray(a), b, atol=1e-12)
        t_jit = _timeit(jit_fn, fn_args, args.repeats)
        t_np = _timeit(np_fn, fn_args, args.repeats)
        print(f"{name:<24} {t_jit * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms {t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()
