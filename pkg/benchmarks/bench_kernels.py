"""Time the compiled window-sweep kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--side 13] [--repeat 20]

Prints one line per kernel with the median time of each backend and the
speed-up, after checking that both backends agree.
"""
import argparse
import statistics
import time

import numpy as np

from frailscan import _kernels_py
from frailscan.spatial import build_neighbor_matrix, enumerate_windows, lattice_region, leroux_matrix

try:
    from frailscan import _kernels
except ImportError:  # extension not built
    _kernels = None


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(side, per_unit, seed):
    rng = np.random.default_rng(seed)
    region = lattice_region(side, side)
    K = region.n_units
    w = enumerate_windows(region, np.full(K, per_unit))
    A = leroux_matrix(build_neighbor_matrix(region), 0.6)
    phi = rng.standard_normal(K)
    aphi, a1 = A @ phi, A.sum(axis=1)
    a_ww = _kernels_py.prefix_quadratic(A, w.order, w.centers, w.sizes)
    a_w1 = _kernels_py.prefix_sums(a1, w.order, w.centers, w.sizes)
    n = K * per_unit
    units = np.repeat(np.arange(K), per_unit)[rng.permutation(n)]
    weights = rng.uniform(0.5, 2.0, n)
    g = np.cumsum(rng.uniform(0, 1e-3, n))
    M = _kernels_py.logrank_pair_matrix(units, weights, g, K)
    return {
        "prefix_sums": (rng.standard_normal((K, 3)), w.order, w.centers, w.sizes),
        "prefix_quadratic": (M, w.order, w.centers, w.sizes),
        "gaussian_llr": (aphi, w.order, w.centers, w.sizes, a_ww, a_w1,
                         float(phi @ aphi), float(a1 @ phi), float(a1.sum()), K),
        "logrank_pair_matrix": (units, weights, g, K),
    }, len(w)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--side", type=int, default=13, help="lattice side length")
    parser.add_argument("--per-unit", type=int, default=10, help="individuals per unit")
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _kernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    inputs, n_windows = cases(args.side, args.per_unit, args.seed)
    print(f"{args.side}x{args.side} lattice, {n_windows} windows, "
          f"{args.side * args.side * args.per_unit} individuals")
    print(f"{'kernel':<22}{'numpy (ms)':>12}{'cython (ms)':>13}{'speed-up':>10}")
    for name, call in inputs.items():
        py, cy = getattr(_kernels_py, name), getattr(_kernels, name)
        np.testing.assert_allclose(cy(*call), py(*call), rtol=1e-10, atol=1e-10)
        t_py = _median_time(lambda: py(*call), args.repeat)
        t_cy = _median_time(lambda: cy(*call), args.repeat)
        print(f"{name:<22}{1e3 * t_py:>12.3f}{1e3 * t_cy:>13.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
