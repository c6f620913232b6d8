"""Time the numba kernels against their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Both paths are
called directly, so the FEDDICE_DISABLE_NUMBA flag does not matter here.
Each kernel is checked for agreement before it is timed.
"""

import argparse
import time

import numpy as np

from feddice import _accel


def _windows(rng, n_groups=5000, per_group=40):
    sizes = rng.integers(1, 2 * per_group, n_groups)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    n = int(offsets[-1])
    window_end = np.arange(1, n_groups + 1, dtype=np.float64) * 10.0
    start = np.repeat(window_end, sizes) - rng.uniform(0.01, 9.99, n)
    proto = rng.integers(0, 4, n).astype(np.int64)
    packets = rng.integers(0, 200, n).astype(np.float64)
    load = packets * rng.uniform(40, 1500, n)
    iat = rng.exponential(0.2, n)
    return offsets, proto, packets, load, iat, start, window_end


def _cases(rng):
    pred = rng.integers(0, 2, 2_000_000).astype(np.int64)
    labels = rng.integers(0, 2, 2_000_000).astype(np.int64)
    coeffs = rng.dirichlet(np.ones(8))
    mat = rng.standard_normal((8, 500_000))
    n = 20_000
    deg = 6
    indptr = np.arange(0, n * deg + 1, deg, dtype=np.int64)
    indices = rng.integers(0, n, n * deg).astype(np.int64)
    infected = rng.random(n) < 0.1
    spread_args = (indptr, indices, infected, ~infected, rng.random(n * deg), 0.3)
    return {
        "window_stats": _windows(rng),
        "confusion_counts": (pred, labels),
        "weighted_sum": (coeffs, mat),
        "spread": spread_args,
    }


def _best(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can run")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'numpy s':>12}{'numba s':>12}{'speedup':>10}")
    for name, call_args in _cases(rng).items():
        np_fn = getattr(_accel, f"{name}_numpy")
        nb_fn = getattr(_accel, f"{name}_numba")
        ref = np_fn(*call_args)
        # first call compiles
        got = nb_fn(*call_args)
        np.testing.assert_allclose(np.asarray(got, dtype=float), np.asarray(ref, dtype=float),
                                   rtol=1e-12, atol=1e-12)
        t_np = _best(np_fn, call_args, args.repeat)
        t_nb = _best(nb_fn, call_args, args.repeat)
        print(f"{name:<18}{t_np:>12.5f}{t_nb:>12.5f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
