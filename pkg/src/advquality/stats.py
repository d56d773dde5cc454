"""Rank statistics, permutation tests and seed aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def ordinal_ranks(scores, ids=None, descending: bool = False):
    """Ranks 1..n by score, ties broken by ascending id (or position)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot rank an empty sequence")
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    key = -scores if descending else scores
    order = np.lexsort((ids, key))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def spearman_from_ranks(a, b) -> float:
    """``1 - 6 sum d^2 / (n (n^2 - 1))`` on tie-free ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"rank vectors differ in length: {a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("spearman needs at least two items")
    d = a - b
    return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1.0)))


def spearman(x, y) -> float:
    """Spearman correlation of two score vectors via tie-broken ranks."""
    return spearman_from_ranks(ordinal_ranks(x), ordinal_ranks(y))


def permutation_test(x, y, statistic=spearman, shuffles: int = 1000, seed=0) -> float:
    """Two-sided permutation p-value with plus-one smoothing."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise ValueError("permutation test needs at least three pairs")
    if shuffles < 1:
        raise ValueError("shuffles must be at least 1")
    rng = np.random.default_rng(seed)
    observed = abs(statistic(x, y))
    hits = 0
    for _ in range(shuffles):
        if abs(statistic(x, rng.permutation(y))) >= observed:
            hits += 1
    return (hits + 1) / (shuffles + 1)


@dataclass(frozen=True)
class SeedAggregate:
    values: tuple
    mean: float
    std: float
    n: int

    def as_dict(self):
        return {"values": list(self.values), "mean": self.mean, "std": self.std, "n": self.n}


def aggregate(values) -> SeedAggregate:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty sequence")
    # sort first so the float sums do not depend on input order
    s = np.sort(v)
    mean = float(s.sum() / len(s))
    std = float(np.sqrt(((s - mean) ** 2).sum() / (len(s) - 1))) if len(s) > 1 else 0.0
    mean = min(max(mean, float(s[0])), float(s[-1]))
    return SeedAggregate(tuple(float(x) for x in v), mean, std, len(v))
