import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from advquality.stats import aggregate, ordinal_ranks, permutation_test, spearman, spearman_from_ranks


def test_spearman_hand_value():
    assert spearman_from_ranks([1, 2, 3, 4, 5], [1, 3, 2, 5, 4]) == pytest.approx(0.8, abs=1e-15)


def test_spearman_extremes():
    a = np.arange(1, 8)
    assert spearman_from_ranks(a, a) == 1.0
    assert spearman_from_ranks(a, a[::-1]) == -1.0


def test_spearman_errors():
    with pytest.raises(ValueError):
        spearman_from_ranks([1], [1])
    with pytest.raises(ValueError):
        spearman_from_ranks([1, 2], [1, 2, 3])


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40, unique=True), st.randoms())
def test_spearman_agrees_with_scipy_without_ties(x, r):
    y = list(x)
    r.shuffle(y)
    want = scipy.stats.spearmanr(x, y).statistic
    if np.isfinite(want):
        assert spearman(x, y) == pytest.approx(want, abs=1e-10)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.randoms())
def test_spearman_symmetric_and_relabel_invariant(x, r):
    y = [v * 0.5 + r.random() for v in x]
    perm = list(range(len(x)))
    r.shuffle(perm)
    rho = spearman(x, y)
    assert rho == spearman(y, x)
    assert -1 - 1e-12 <= rho <= 1 + 1e-12


def test_ordinal_ranks_break_ties_by_id():
    assert list(ordinal_ranks([2.0, 2.0, 1.0], ids=[9, 3, 5])) == [3, 2, 1]
    assert list(ordinal_ranks([0.0, 0.0, 0.0])) == [1, 2, 3]
    assert list(ordinal_ranks([1.0, 3.0, 2.0], descending=True)) == [3, 1, 2]
    with pytest.raises(ValueError):
        ordinal_ranks([])


def test_permutation_identical_is_significant():
    x = np.random.default_rng(0).normal(size=50)
    assert permutation_test(x, x, shuffles=1000, seed=1) <= 0.01


def test_permutation_independent_is_not():
    rng = np.random.default_rng(4)
    assert permutation_test(rng.normal(size=50), rng.normal(size=50), shuffles=1000, seed=1) > 0.01


def test_permutation_errors_and_determinism():
    x = np.arange(10.0)
    with pytest.raises(ValueError):
        permutation_test(x, x, shuffles=0)
    with pytest.raises(ValueError):
        permutation_test(x, x[:5])
    with pytest.raises(ValueError):
        permutation_test(x[:2], x[:2])
    y = np.random.default_rng(2).normal(size=10)
    assert permutation_test(x, y, shuffles=200, seed=3) == permutation_test(x, y, shuffles=200, seed=3)


def test_permutation_monotone_in_effect_size():
    rng = np.random.default_rng(7)
    x = rng.normal(size=40)
    noise = rng.normal(size=40)
    ps = [permutation_test(x, x + s * noise, shuffles=300, seed=0) for s in (0.1, 1.0, 3.0, 30.0)]
    assert all(a <= b for a, b in zip(ps, ps[1:]))


def test_aggregate_examples():
    a = aggregate([1, 1, 1])
    assert a.mean == 1 and a.std == 0 and a.n == 3
    b = aggregate([0, 1])
    assert b.mean == 0.5 and b.std == pytest.approx(0.70710678, abs=1e-8)
    assert aggregate([3.5]).std == 0.0
    with pytest.raises(ValueError):
        aggregate([])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.randoms())
def test_aggregate_permutation_invariant(values, r):
    shuffled = list(values)
    r.shuffle(shuffled)
    a, b = aggregate(values), aggregate(shuffled)
    assert a.mean == b.mean and a.std == b.std
    assert min(values) <= a.mean <= max(values)
    assert a.std >= 0
