"""Compare the numba and numpy kernel backends on the flow hot path.

Usage: python benchmarks/bench_kernels.py [--kernels 100] [--particles 500] [--repeat 5]
"""

import argparse
import time

import numpy as np

from tdoaflow import _kernels_numba, _kernels_numpy
from tdoaflow.flow import FlowKind, lambda_schedule
from tdoaflow.geometry import face_center_receivers


def problem(K, N, seed=0):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-800, 800, (K, 3))
    A = rng.standard_normal((K, 3, 3)) * 20
    cov = A @ np.swapaxes(A, 1, 2) + np.eye(3)
    L = np.linalg.cholesky(cov)
    x0 = mu[:, None, :] + np.einsum("kij,knj->kni", L, rng.standard_normal((K, N, 3)))
    rx = face_center_receivers(1000.0)
    return mu, cov, np.ascontiguousarray(x0), rx[0], rx[1], rng


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kernels", type=int, default=100)
    ap.add_argument("--particles", type=int, default=500)
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    K, N = args.kernels, args.particles
    mu, cov, x0, qa, qb, rng = problem(K, N)
    lam = lambda_schedule(args.steps)
    r_var = np.ones(K)
    z_r = 120.0
    print(f"K={K} N={N} N_lambda={args.steps}, best of {args.repeat}")
    print(f"{'kernel':<16}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for kind in FlowKind:
        eta = rng.standard_normal((lam.size, K, N)) if kind.stochastic else np.zeros((1, 1, 1))
        args_ = (mu, cov, x0, qa, qb, z_r, r_var, lam, int(kind), eta)
        _kernels_numba.flow_tdoa(*args_)  # compile
        t_np = best_of(lambda: _kernels_numpy.flow_tdoa(*args_), args.repeat)
        t_nb = best_of(lambda: _kernels_numba.flow_tdoa(*args_), args.repeat)
        print(f"{'flow ' + kind.name:<16}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}")
    pts = x0.reshape(-1, 3)[:20000].copy()
    logpi = np.log(np.full(K, 1.0 / K))
    _kernels_numba.mixture_logpdf(pts, mu, cov, logpi)
    t_np = best_of(lambda: _kernels_numpy.mixture_logpdf(pts, mu, cov, logpi), args.repeat)
    t_nb = best_of(lambda: _kernels_numba.mixture_logpdf(pts, mu, cov, logpi), args.repeat)
    print(f"{'mixture_logpdf':<16}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
