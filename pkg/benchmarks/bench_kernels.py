"""Time the numba kernels against their pure-numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py [--repeat 5]``.  Both variants
are imported in one process, so ``HPL_DISABLE_NUMBA`` only matters in that
it removes the jit column.
"""
import argparse
import time

import numpy as np

from hpl import kernels
from hpl.environment import generate_tube


def _best(fn, repeat):
    fn()  # warm-up (and jit compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _cases(rng):
    Z1 = rng.normal(size=(1000, 15))
    Z2 = rng.normal(size=(200, 15))
    ls = rng.uniform(0.5, 2.0, 15)
    env = generate_tube(11)
    P = rng.uniform(-1, 8, size=(5000, 2))
    proj = (P, env.starts[:-1].copy(), env.tangents.copy(), env.lengths.copy(),
            env.cum_s.copy(), 1e-9)

    n, m = 60, 160
    M = rng.normal(size=(n, n))
    Pq = M @ M.T / n + 1e-3 * np.eye(n)
    q = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    h = rng.uniform(0.5, 1.5, m)
    qp = (Pq, q, G, h, 1e-10, 60, 1e-12)
    return {
        "ard_gram 1000x200x15": (kernels.ard_gram_numpy,
                                 getattr(kernels, "ard_gram", None), (Z1, Z2, 1.3, ls)),
        "project_points 5000": (kernels.project_points_numpy,
                                getattr(kernels, "project_points", None), proj),
        "ipm 60 vars/160 rows": (kernels.ipm_core_numpy,
                                 getattr(kernels, "ipm_core_jit", None), qp),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    jit_on = kernels.HAVE_NUMBA
    print(f"numba {'enabled' if jit_on else 'disabled'}")
    print(f"{'kernel':<24}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, (np_fn, jit_fn, a) in _cases(rng).items():
        t_np = _best(lambda: np_fn(*a), args.repeat)
        if jit_on and jit_fn is not None and jit_fn is not np_fn:
            t_jit = _best(lambda: jit_fn(*a), args.repeat)
            print(f"{name:<24}{1e3 * t_np:>12.3f}{1e3 * t_jit:>12.3f}{t_np / t_jit:>10.1f}")
        else:
            print(f"{name:<24}{1e3 * t_np:>12.3f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
