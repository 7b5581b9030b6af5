"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both implementations are imported directly, so no environment flag is
needed. Numba functions are called once before timing to exclude JIT
compilation (or cache loading).
"""

import argparse
import timeit

import numpy as np

from gbho._kernels import RELU, numba_impl, numpy_impl


def cases(rng):
    """(name, args) pairs sized like the MNIST-subset workload."""
    d, h, k, n = 784, 100, 10, 700
    x = rng.random((n, d))
    y = rng.integers(0, k, n)
    beta = rng.standard_normal(d * h + h + h * k + k) * 0.05
    coef = np.full(beta.size, np.exp(-4.0))
    perm = rng.permutation(n)
    a = rng.standard_normal((60, 60))
    spd = a @ a.T + 60 * np.eye(60)
    pts = rng.uniform(-10, 0, (60, 2))
    return [
        ("cholesky_lower 60x60", "cholesky_lower", (spd,)),
        ("rbf_cross 60x1000", "rbf_cross", (pts, rng.uniform(-10, 0, (1000, 2)), np.array([2.0, 3.0]))),
        ("mlp_loss_grad n=700", "mlp_loss_grad", (beta, x, y, d, h, k, RELU)),
        ("sgd_epoch_mlp n=700 b=32", "sgd_epoch_mlp",
         (beta, np.zeros_like(beta), x, y, perm, 32, 0.05, 0.9, coef, d, h, k, RELU)),
    ]


def bench(fn, args, repeat):
    # epoch kernels update beta in place, so give every call fresh copies
    def call():
        fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])

    call()
    return min(timeit.repeat(call, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, fargs in cases(rng):
        t_np = bench(getattr(numpy_impl, name), fargs, args.repeat)
        t_nb = bench(getattr(numba_impl, name), fargs, args.repeat)
        print(f"{label:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
