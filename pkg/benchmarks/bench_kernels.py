"""Compare the numba and numpy paths of the per-subject Laplace + IS kernel.

Usage::

    python3 benchmarks/bench_kernels.py [--subjects 300] [--T 17] [--draws 20] [--repeat 5]

Both paths run on identical inputs; the script reports the best wall time of
``--repeat`` calls for each and the largest absolute difference between
their outputs.  The first numba call (compilation, or loading the on-disk
cache) is excluded from the timings.
"""

import argparse
import time

import numpy as np

from nagvac import _jit
from nagvac._kernels import panel_laplace_is

OUTPUTS = ("modes", "covs", "iters", "converged", "status", "logL", "rbar", "dR", "dlog_gamma", "dlog_sigma2")


def make_inputs(family, n_subjects, T, q, N, seed=0):
    rng = np.random.default_rng(seed)
    n = n_subjects * T
    offsets = np.arange(0, n + 1, T)
    eta0 = 0.5 * rng.standard_normal(n)
    R = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))])
    if family == "binomial":
        y = rng.integers(0, 2, n).astype(float)
    elif family == "poisson":
        y = rng.poisson(1.5, n).astype(float)
    else:
        y = rng.standard_normal(n)
    gamma = np.full(q, 0.8)
    alpha0 = np.zeros((n_subjects, q))
    eps = rng.standard_normal((n_subjects, N, q))
    return eta0, R, y, offsets, gamma, 1.0, alpha0, eps


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=300)
    ap.add_argument("--T", type=int, default=17)
    ap.add_argument("--q", type=int, default=2, help="random-effect dimension (intercept plus q-1 slopes)")
    ap.add_argument("--draws", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _jit.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"subjects={args.subjects} T={args.T} q={args.q} draws={args.draws} repeat={args.repeat}")
    print(f"{'family':<10}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}{'max |diff|':>14}")
    for family in ("binomial", "poisson", "gaussian"):
        inputs = make_inputs(family, args.subjects, args.T, args.q, args.draws)
        panel_laplace_is(family, *inputs, use_numba=True)  # compile or load the cache
        t_nb, a = best_time(lambda: panel_laplace_is(family, *inputs, use_numba=True), args.repeat)
        t_np, b = best_time(lambda: panel_laplace_is(family, *inputs, use_numba=False), args.repeat)
        diff = max(
            float(np.max(np.abs(np.asarray(x, float) - np.asarray(z, float))))
            for name, x, z in zip(OUTPUTS, a, b)
            if name != "iters"
        )
        print(f"{family:<10}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x{diff:>14.2e}")


if __name__ == "__main__":
    main()
