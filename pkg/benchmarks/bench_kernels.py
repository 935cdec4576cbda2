#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

Set IBNORM_NUMBA=0 to confirm the package still works on the numpy path;
this script always times both implementations directly.
"""

import time

import numpy as np

from ibnorm import kernels


def bench(fn, *args, repeat=20):
    fn(*args)  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(16 * 64 * 64)          # norm-site activation block
    r = np.abs(u)
    batch = rng.standard_normal((64, 64))          # gram batch
    samples = rng.standard_normal(100_000)         # KDE workload
    grid = np.linspace(-6, 6, 512)

    cases = [
        ("f_eval(T)", lambda impl: impl["f_eval"](r, 4.0, kernels.KIND_T)),
        ("f_deriv(L)", lambda impl: impl["f_deriv"](r, 4.0, kernels.KIND_L)),
        ("dev_compress(L)", lambda impl: impl["dev_compress"](u, 4.0, kernels.KIND_L)),
        ("dev_compress_deriv(T)",
         lambda impl: impl["dev_compress_deriv"](u, 4.0, kernels.KIND_T)),
        ("pairwise_sq_dists", lambda impl: impl["pairwise_sq_dists"](batch)),
        ("kde_eval", lambda impl: impl["kde_eval"](samples, grid, 0.1)),
    ]

    impls = dict(kernels.implementations())
    if "numba" not in impls:
        print("numba unavailable; timing the numpy path only")

    header = f"{'kernel':<24}" + "".join(f"{name:>12}" for name in impls)
    if len(impls) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, call in cases:
        times = {name: bench(lambda: call(impl)) for name, impl in impls.items()}
        row = f"{label:<24}" + "".join(f"{times[n] * 1e3:>10.3f}ms" for n in impls)
        if len(times) == 2:
            row += f"{times['numpy'] / times['numba']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
