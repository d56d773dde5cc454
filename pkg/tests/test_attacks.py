import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advquality.attacks import (AttackConfig, fgsm, margin, min_perturbation, pgd, pgd_multi_restart,
                                robust_accuracy, square_patch_attack, transfer_attack)
from advquality.nn import DimensionError, Network, forward, mlp

from conftest import Staircase, linear_binary, random_net


def contained(adv, x, eps):
    return np.all(np.abs(adv - x) <= eps + 1e-9) and np.all(adv >= 0) and np.all(adv <= 1)


def ce(net, x, y):
    z = forward(net, np.atleast_2d(x))[0]
    z = z - z.max()
    return float(-(z[y] - np.log(np.exp(z).sum())))


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_every_attack_is_contained(seed, eps):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.random(net.input_dim)
    y = int(rng.integers(net.class_count))
    cfg = AttackConfig(epsilon=eps, step_size=max(eps / 4, 1e-3), iterations=5, restarts=2)
    cfg_t = replace(cfg, target_class=int((y + 1) % net.class_count))
    outs = [fgsm(net, x, y, eps), pgd(net, x, y, cfg, seed), pgd_multi_restart(net, x, y, cfg, seed),
            pgd(net, x, y, cfg_t, seed), square_patch_attack(net, x, y, eps, 20, seed),
            transfer_attack(random_net(rng, dims=[net.input_dim, 5, net.class_count]), net, x, y, cfg, seed)]
    for o in outs:
        assert contained(o.adv, x, eps)


def test_zero_epsilon_returns_input(rng):
    net = random_net(rng)
    x = rng.random(net.input_dim)
    assert np.array_equal(fgsm(net, x, 0, 0.0).adv, x)
    cfg = AttackConfig(epsilon=0.0, step_size=0.01, iterations=3)
    assert np.array_equal(pgd(net, x, 0, cfg).adv, x)


def test_fgsm_equals_one_step_pgd_bitwise(rng):
    for _ in range(200):
        net = random_net(rng)
        X = rng.random((4, net.input_dim))
        Y = rng.integers(0, net.class_count, 4)
        eps = float(rng.uniform(0.01, 0.3))
        cfg = AttackConfig(epsilon=eps, step_size=eps, iterations=1, random_start=False)
        a, b = fgsm(net, X, Y, eps), pgd(net, X, Y, cfg)
        assert np.array_equal(a.adv, b.adv)
        assert np.array_equal(a.success, b.success)
        assert np.array_equal(a.kappa, b.kappa)


def test_fgsm_linear_flip_condition():
    # margin m = 0.3 for class 1; eps * ||w||_1 must exceed it to flip
    w = np.array([1.0, -2.0, 0.5])
    net = linear_binary(w, 0.0)
    x = np.array([0.5, 0.2, 0.2])
    m = float(w @ x)
    assert m == pytest.approx(0.2)
    l1 = np.abs(w).sum()
    assert not fgsm(net, x, 1, 0.9 * m / l1).success
    assert fgsm(net, x, 1, 1.1 * m / l1).success


def test_fgsm_zero_gradient_keeps_input():
    net = Network([np.zeros((2, 3))], [np.array([1.0, 0.0])])
    x = np.full(3, 0.5)
    out = fgsm(net, x, 0, 0.1)
    assert np.array_equal(out.adv, x) and not out.success
    out = fgsm(net, x, 1, 0.1)
    assert np.array_equal(out.adv, x) and out.success


def test_pgd_best_iterate_never_below_clean_unless_fooling(rng):
    for _ in range(100):
        net = random_net(rng)
        x = rng.random(net.input_dim)
        y = int(rng.integers(net.class_count))
        cfg = AttackConfig(epsilon=0.1, step_size=0.03, iterations=8, random_start=False)
        out = pgd(net, x, y, cfg)
        if not out.success:
            assert ce(net, out.adv, y) >= ce(net, x, y)
        assert out.loss == pytest.approx(ce(net, out.adv, y), rel=1e-9, abs=1e-12)


def test_kappa_matches_brute_force_iterates(rng):
    # replay the iterates by hand and find the first fooling one
    for _ in range(50):
        net = random_net(rng)
        x = rng.random(net.input_dim)
        y = int(rng.integers(net.class_count))
        eps, step, K = 0.2, 0.05, 6
        out = pgd(net, x, y, AttackConfig(eps, step, K, random_start=False))
        lo, hi = np.maximum(x - eps, 0), np.minimum(x + eps, 1)
        cur, kappa = x.copy(), K
        for k in range(K):
            if net.predict(cur)[0] != y:
                kappa = k
                break
            Q = np.eye(net.class_count)[[y]]
            _, _, g = net.loss_input_grad(cur[None], Q)
            cur = np.clip(cur + step * np.sign(g[0]), lo, hi)
        assert out.kappa == kappa
        assert (out.kappa == 0) == (net.predict(x)[0] != y)


def test_targeted_pgd_moves_toward_target():
    w = np.array([1.0, 1.0])
    net = linear_binary(w, -1.2)
    x = np.array([0.5, 0.5])
    assert net.predict(x)[0] == 0
    out = pgd(net, x, 0, AttackConfig(0.2, 0.05, 10, random_start=False, target_class=1))
    assert out.success and net.predict(out.adv)[0] == 1


def test_multi_restart_single_equals_pgd(rng):
    net = random_net(rng)
    X = rng.random((10, net.input_dim))
    Y = rng.integers(0, net.class_count, 10)
    cfg = AttackConfig(0.1, 0.025, 10, restarts=1, random_start=False)
    a, b = pgd(net, X, Y, cfg), pgd_multi_restart(net, X, Y, cfg)
    assert np.array_equal(a.adv, b.adv)
    cfg = replace(cfg, random_start=True)
    a, b = pgd(net, X, Y, cfg, 7), pgd_multi_restart(net, X, Y, cfg, 7)
    assert np.array_equal(a.adv, b.adv)


def test_robust_accuracy_nonincreasing_in_restarts(rng):
    net = random_net(rng, dims=[8, 16, 3])
    X = rng.random((200, 8))
    Y = net.predict(X)
    accs = [robust_accuracy(pgd_multi_restart(net, X, Y, AttackConfig(0.05, 0.0125, 5, restarts=r), 3))
            for r in (1, 2, 4, 8)]
    assert all(b <= a for a, b in zip(accs, accs[1:]))


def test_attacks_never_fix_mistakes(rng):
    net = random_net(rng)
    X = rng.random((50, net.input_dim))
    Y = rng.integers(0, net.class_count, 50)
    wrong = net.predict(X) != Y
    for out in (pgd(net, X, Y, AttackConfig(0.1, 0.03, 5)), square_patch_attack(net, X, Y, 0.1, 30),
                pgd_multi_restart(net, X, Y, AttackConfig(0.1, 0.03, 5, restarts=3))):
        assert np.all(out.success[wrong])


def test_attacks_are_deterministic(rng):
    net = random_net(rng)
    X = rng.random((5, net.input_dim))
    Y = rng.integers(0, net.class_count, 5)
    cfg = AttackConfig(0.1, 0.02, 4, restarts=3)
    for f in (lambda: pgd_multi_restart(net, X, Y, cfg, 11), lambda: square_patch_attack(net, X, Y, 0.1, 50, 11)):
        assert np.array_equal(f().adv, f().adv)


def grid_oracle(net, x, y, step, eps_max):
    """Literal search: run I-FGSM at every grid radius, return the first that flips."""
    if net.predict(x)[0] != y:
        return 0.0, True
    Q = np.eye(net.class_count)[[y]]
    k_max = int(math.floor(eps_max / step + 1e-9))
    for k in range(1, k_max + 1):
        eps = k * step
        lo, hi = np.maximum(x - eps, 0), np.minimum(x + eps, 1)
        cur = x.copy()
        for _ in range(int(math.ceil(eps / step - 1e-9))):
            _, _, g = net.loss_input_grad(cur[None], Q)
            cur = np.clip(cur + step * np.sign(g[0]), lo, hi)
            if net.predict(cur)[0] != y:
                return eps, True
    return eps_max, False


def test_min_perturbation_matches_literal_grid_search(rng):
    for _ in range(60):
        net = random_net(rng, max_dim=8)
        x = rng.random(net.input_dim)
        y = int(rng.integers(net.class_count))
        got = min_perturbation(net, x, y, step=0.01, eps_max=0.2)
        want = grid_oracle(net, x, y, 0.01, 0.2)
        assert got[1] == want[1]
        assert got[0] == pytest.approx(want[0], abs=1e-12)


def test_min_perturbation_examples():
    net = linear_binary([1.0, 1.0], -0.5)
    assert min_perturbation(net, np.array([0.1, 0.1]), 1) == (0.0, True)
    flat = Network([np.zeros((2, 3))], [np.array([1.0, 0.0])])
    assert min_perturbation(flat, np.full(3, 0.5), 0, 1 / 255, 32 / 255) == (32 / 255, False)


def test_min_perturbation_linear_oracle(rng):
    for _ in range(50):
        d = int(rng.integers(2, 16))
        w = rng.normal(size=d)
        x = rng.uniform(0.3, 0.7, d)
        b = -float(w @ x) + float(rng.uniform(0.01, 0.5)) * np.abs(w).sum() * 0.1
        net = linear_binary(w, b)
        m = float(w @ x + b)
        eps, found = min_perturbation(net, x, 1, 1 / 255, 0.3)
        assert found
        assert abs(eps - m / np.abs(w).sum()) <= 1 / 255 + 1e-12


def test_min_perturbation_monotone_in_robustness(rng):
    # larger margin on the same x never gives a smaller epsilon star
    w = rng.normal(size=6)
    x = rng.uniform(0.3, 0.7, 6)
    prev = -1.0
    for shift in np.linspace(0.01, 0.4, 8):
        net = linear_binary(w, -float(w @ x) + shift)
        eps, _ = min_perturbation(net, x, 1, 1 / 255, 0.5)
        assert eps >= prev
        prev = eps


def test_square_attack_respects_budget_and_monotone_margin(rng):
    net = random_net(rng, dims=[10, 12, 3])
    X = rng.random((30, 10))
    Y = net.predict(X)
    for budget in (1, 2, 17, 100):
        out = square_patch_attack(net, X, Y, 0.05, budget, seed=1)
        assert np.all(out.queries <= budget)
    clean = margin(forward(net, X), Y)
    out = square_patch_attack(net, X, Y, 0.05, 300, seed=2)
    final = margin(forward(net, out.adv), Y)
    assert np.all(final <= clean + 1e-12)
    assert np.allclose(out.loss, -final, atol=1e-12)
    assert contained(out.adv, X, 0.05)


def test_square_attack_beats_pgd_on_gradient_masked_model(rng):
    w = rng.normal(size=12)
    X = rng.uniform(0.3, 0.7, (200, 12))
    b = -np.median(X @ w)
    model = Staircase(w, b)
    Y = model.logits(X).argmax(axis=1)
    eps = 0.05
    cfg = AttackConfig(eps, eps / 4, 20, random_start=False)
    pgd_rate = 1 - robust_accuracy(pgd(model, X, Y, cfg))
    sq_rate = 1 - robust_accuracy(square_patch_attack(model, X, Y, eps, 200, seed=0))
    assert pgd_rate == 0.0
    assert sq_rate > 0.3


def test_transfer_self_equals_white_box(rng):
    net = random_net(rng, dims=[8, 10, 3])
    X = rng.random((40, 8))
    Y = rng.integers(0, 3, 40)
    cfg = AttackConfig(0.1, 0.025, 10, restarts=3)
    a = transfer_attack(net, net, X, Y, cfg, 5)
    b = pgd_multi_restart(net, X, Y, cfg, 5)
    assert robust_accuracy(a) == robust_accuracy(b)


def test_transfer_dimension_mismatch():
    with pytest.raises(DimensionError):
        transfer_attack(mlp(4, 3, (5,)), mlp(5, 3, (5,)), np.zeros(4), 0, AttackConfig())
    with pytest.raises(DimensionError):
        transfer_attack(mlp(4, 3, (5,)), mlp(4, 2, (5,)), np.zeros(4), 0, AttackConfig())


def test_attack_config_validation():
    with pytest.raises(ValueError, match="attack.step_size"):
        AttackConfig(epsilon=0.01, step_size=0.05).validate()
    with pytest.raises(ValueError, match="attack.iterations"):
        AttackConfig(iterations=0).validate()
    with pytest.raises(ValueError, match="attack.epsilon"):
        AttackConfig(epsilon=1.5).validate()
    AttackConfig().validate()


def test_default_attack_config():
    cfg = AttackConfig()
    assert cfg.epsilon == 8 / 255 and cfg.step_size == 2 / 255 and cfg.iterations == 10
