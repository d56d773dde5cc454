import os
import subprocess
import sys

import numpy as np
import pytest

from advquality import _pykernels, backend

from conftest import random_net

compiled = pytest.mark.skipif(backend.NAME != "compiled", reason="compiled extension not built")


def _case(rng, n=6):
    net = random_net(rng)
    X = rng.random((n, net.input_dim))
    Y = rng.integers(0, net.class_count, size=n)
    Q = np.zeros((n, net.class_count))
    Q[np.arange(n), Y] = 1.0
    return net, X, Y, Q


@compiled
def test_forward_and_gradient_parity(rng):
    from advquality import _ckernels
    for _ in range(20):
        net, X, Y, Q = _case(rng)
        a = _pykernels.loss_input_grad(net.weights, net.biases, X, Q)
        b = _ckernels.loss_input_grad(net.weights, net.biases, X, Q)
        for u, v in zip(a, b):
            assert np.allclose(u, v, rtol=1e-12, atol=1e-13)


@compiled
@pytest.mark.parametrize("mode,direction", [(0, 1.0), (1, -1.0), (2, 1.0)])
def test_pgd_loop_parity(rng, mode, direction):
    from advquality import _ckernels
    for _ in range(20):
        net, X, Y, Q = _case(rng)
        if mode == 2:
            Q = rng.dirichlet(np.ones(net.class_count), size=len(X))
        eps = 0.1
        lo, hi = np.maximum(X - eps, 0), np.minimum(X + eps, 1)
        start = np.clip(X + rng.uniform(-eps, eps, X.shape), lo, hi)
        args = (net.weights, net.biases, X, Q, Y, mode, start, lo, hi, 0.025, 7, direction, False)
        a = _pykernels.pgd_loop(*args)
        b = _ckernels.pgd_loop(*args)
        assert np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])
        assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], rtol=1e-10)


def test_pure_python_switch():
    env = dict(os.environ, ADVQUALITY_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import advquality.backend as b; print(b.NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
