"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each row reports the best
of several repeats for one kernel call at the given batch size, on the desk
network shape (16 -> 64 -> 64 -> 3).
"""
import argparse
import timeit

import numpy as np

from advquality import _pykernels
from advquality.nn import mlp

try:
    from advquality import _ckernels
except ImportError:
    _ckernels = None


def setup(n, seed=0):
    rng = np.random.default_rng(seed)
    net = mlp(16, 3, (64, 64), seed=seed)
    X = rng.random((n, 16))
    Y = rng.integers(0, 3, n)
    Q = np.eye(3)[Y]
    eps = 0.1
    lo, hi = np.maximum(X - eps, 0), np.minimum(X + eps, 1)
    start = np.clip(X + rng.uniform(-eps, eps, X.shape), lo, hi)
    return net, X, Y, Q, start, lo, hi


def cases(n):
    net, X, Y, Q, start, lo, hi = setup(n)
    W, b = net.weights, net.biases
    return {
        "loss_input_grad": lambda k: k.loss_input_grad(W, b, X, Q),
        "pgd_loop K=10": lambda k: k.pgd_loop(W, b, X, Q, Y, 0, start, lo, hi, 0.025, 10, 1.0, False),
    }


def best_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1, 16, 128, 1200])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'kernel':<18}{'n':>6}{'numpy us':>12}{'compiled us':>14}{'speedup':>10}")
    for n in args.sizes:
        for name, call in cases(n).items():
            py = best_time(lambda: call(_pykernels), args.repeat)
            if _ckernels is None:
                print(f"{name:<18}{n:>6}{py * 1e6:>12.1f}{'-':>14}{'-':>10}")
                continue
            c = best_time(lambda: call(_ckernels), args.repeat)
            print(f"{name:<18}{n:>6}{py * 1e6:>12.1f}{c * 1e6:>14.1f}{py / c:>9.1f}x")


if __name__ == "__main__":
    main()
