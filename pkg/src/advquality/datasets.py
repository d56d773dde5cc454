"""Synthetic data with a built-in ambiguity oracle, delimited I/O, splits
and quality-driven pruning."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .profiler import QualityRanking

log = logging.getLogger(__name__)

REMOVAL_MODES = ("random", "ascending_quality")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    classes: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or len(X) != len(ids) or len(y) != len(ids):
            raise DataFormatError(f"inconsistent shapes: ids {ids.shape}, X {X.shape}, y {y.shape}")
        if len(np.unique(ids)) != len(ids):
            raise DataFormatError("example ids must be unique")
        if X.size and (not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1):
            raise DataFormatError("features must lie in [0, 1]")
        if self.classes < 2:
            raise DataFormatError("need at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise DataFormatError(f"labels must lie in [0, {self.classes})")
        for a in (ids, X, y):
            a.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.ids[mask], self.X[mask], self.y[mask], self.classes)

    def without(self, removed_ids) -> "Dataset":
        return self.subset(~np.isin(self.ids, np.asarray(removed_ids, dtype=np.int64)))

    def class_counts(self):
        return np.bincount(self.y, minlength=self.classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.ids, self.X, self.y):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.classes).encode())
        return h.hexdigest()[:16]


@dataclass
class SyntheticSpec:
    classes: int = 3
    dim: int = 16
    means: list | None = None
    spread: float = 0.1
    ambiguous_fraction: float = 0.1
    n_per_class: int = 600
    seed: int = 0
    # range for seeded class means when ``means`` is not given
    mean_range: list = field(default_factory=lambda: [0.2, 0.8])

    def validate(self, prefix: str = "data") -> "SyntheticSpec":
        if int(self.classes) != self.classes or self.classes < 2:
            raise ValueError(f"{prefix}.classes: must be an integer >= 2")
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"{prefix}.dim: must be an integer >= 2")
        if not self.spread > 0:
            raise ValueError(f"{prefix}.spread: must be positive")
        if not 0 <= self.ambiguous_fraction <= 1:
            raise ValueError(f"{prefix}.ambiguous_fraction: must lie in [0, 1]")
        if int(self.n_per_class) != self.n_per_class or self.n_per_class < 1:
            raise ValueError(f"{prefix}.n_per_class: must be a positive integer")
        lo, hi = self.mean_range
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"{prefix}.mean_range: need 0 <= low < high <= 1")
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (self.classes, self.dim):
                raise ValueError(f"{prefix}.means: expected shape ({self.classes}, {self.dim}), got {m.shape}")
        return self

    def class_means(self):
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 1])
        return rng.uniform(*self.mean_range, size=(self.classes, self.dim))


def ambiguity_oracle(X, y, means, spread, ambiguous_fraction: float = 0.0):
    """Posterior mass of the wrong classes under the generating mixture.

    Class ``c`` draws from its own Gaussian with weight ``1 - a`` and from the
    midpoints to each other class with total weight ``a``; priors are equal
    and clamping is ignored.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    means = np.asarray(means, dtype=np.float64)
    k = len(means)
    a = float(ambiguous_fraction)
    logp = np.empty((len(X), k))
    for c in range(k):
        comps = [means[c][None]]
        w = [1.0 - a]
        if a > 0:
            others = [j for j in range(k) if j != c]
            comps.append(0.5 * (means[c] + means[others]))
            w += [a / (k - 1)] * len(others)
        comps = np.vstack(comps)
        d2 = ((X[:, None, :] - comps[None]) ** 2).sum(axis=2)
        logp[:, c] = logsumexp(-d2 / (2.0 * spread ** 2), b=np.array(w)[None, :], axis=1)
    logp -= logp.max(axis=1, keepdims=True)
    post = np.exp(logp)
    post /= post.sum(axis=1, keepdims=True)
    return 1.0 - post[np.arange(len(X)), np.asarray(y)]


def generate_synthetic(spec: SyntheticSpec):
    """Gaussian class clouds plus a fraction of points near class midpoints.

    Returns ``(dataset, ambiguity)``; ids follow a seeded shuffle so classes
    interleave.
    """
    spec.validate()
    means = spec.class_means()
    d2 = ((means[:, None] - means[None]) ** 2).sum(axis=2)
    if np.any(d2[~np.eye(spec.classes, dtype=bool)] == 0):
        log.warning("synthetic spec has coinciding class means")
    rng = np.random.default_rng([spec.seed, 2])
    n_amb = int(round(spec.ambiguous_fraction * spec.n_per_class))
    xs, ys = [], []
    for c in range(spec.classes):
        centers = np.repeat(means[c][None], spec.n_per_class, axis=0)
        if n_amb:
            others = rng.integers(0, spec.classes - 1, size=n_amb)
            others = others + (others >= c)
            centers[:n_amb] = 0.5 * (means[c] + means[others])
        xs.append(centers + spec.spread * rng.standard_normal(centers.shape))
        ys.append(np.full(spec.n_per_class, c))
    X = np.clip(np.vstack(xs), 0.0, 1.0)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    ds = Dataset(np.arange(len(y)), X, y, spec.classes)
    return ds, ambiguity_oracle(X, y, means, spec.spread, n_amb / spec.n_per_class)


def save_delimited(dataset: Dataset, path):
    with open(path, "w") as fh:
        fh.write(f"dim={dataset.dim},classes={dataset.classes}\n")
        for i, lab, row in zip(dataset.ids, dataset.y, dataset.X):
            fh.write(f"{int(i)},{int(lab)}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_delimited(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(f"{path}: empty dataset file")
    try:
        header = dict(kv.split("=", 1) for kv in lines[0].strip().split(","))
        dim, classes = int(header["dim"]), int(header["classes"])
    except (KeyError, ValueError):
        raise DataFormatError(f"{path}:1: header must read 'dim=<d>,classes=<k>'") from None
    ids, ys, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise DataFormatError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(parts)}")
        try:
            i, lab = int(parts[0]), int(parts[1])
            feats = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= lab < classes:
            raise DataFormatError(f"{path}:{lineno}: label {lab} outside [0, {classes})")
        if any(not 0.0 <= v <= 1.0 for v in feats):
            raise DataFormatError(f"{path}:{lineno}: feature outside [0, 1]")
        ids.append(i)
        ys.append(lab)
        rows.append(feats)
    if not ids:
        raise DataFormatError(f"{path}: dataset has no examples")
    return Dataset(np.array(ids), np.array(rows).reshape(len(ids), dim), np.array(ys), classes)


def _check_ranking(dataset: Dataset, ranking: QualityRanking):
    try:
        return ranking.aligned(dataset.ids)
    except ValueError:
        raise ValueError("ranking does not cover exactly the dataset's example ids") from None


def class_balanced_halves(dataset: Dataset, ranking: QualityRanking):
    """Split each class at its median rank.

    The upper half of every class goes to ``high``; an odd middle example
    goes to ``low``. Returns ``(high, low)``.
    """
    ranks = _check_ranking(dataset, ranking)
    high = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.y == c)
        order = members[np.lexsort((dataset.ids[members], ranks[members]))]
        high[order[len(order) - len(order) // 2:]] = True
    return dataset.subset(high), dataset.subset(~high)


def removal_ids(dataset: Dataset, ranking: QualityRanking, fraction: float, mode: str,
                seed=0, classwise: bool = False):
    """Ids that :func:`remove_fraction` drops, in removal order."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if mode not in REMOVAL_MODES:
        raise ValueError(f"mode must be one of {REMOVAL_MODES}, got {mode!r}")
    ranks = _check_ranking(dataset, ranking)
    groups = ([np.flatnonzero(dataset.y == c) for c in range(dataset.classes)]
              if classwise else [np.arange(len(dataset))])
    rng = np.random.default_rng([int(seed), 3])
    removed = []
    for members in groups:
        k = int(math.floor(fraction * len(members) + 1e-9))
        by_id = members[np.argsort(dataset.ids[members], kind="stable")]
        if mode == "ascending_quality":
            order = by_id[np.lexsort((dataset.ids[by_id], ranks[by_id]))]
        else:
            order = by_id[rng.permutation(len(by_id))]
        removed.append(dataset.ids[order[:k]])
    return np.concatenate(removed)


def remove_fraction(dataset: Dataset, ranking: QualityRanking, fraction: float, mode: str,
                    seed=0, classwise: bool = False) -> Dataset:
    """Drop ``floor(fraction * n)`` examples, lowest quality first or at random.

    For a fixed seed the survivor sets are nested across fractions.
    """
    return dataset.without(removal_ids(dataset, ranking, fraction, mode, seed, classwise))


def stratified_split(dataset: Dataset, test_fraction: float, seed=0):
    """Per-class proportional ``(train, test)`` split."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng([int(seed), 4])
    test = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.y == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"class {c} has fewer than two examples")
        k = min(max(int(round(test_fraction * len(members))), 1), len(members) - 1)
        test[members[rng.permutation(len(members))[:k]]] = True
    return dataset.subset(~test), dataset.subset(test)


def write_manifest(path, removed_ids, mode: str, fraction: float, seed: int, n_total: int):
    lines = [f"# mode={mode}", f"# fraction={fraction!r}", f"# seed={int(seed)}",
             f"# n_total={int(n_total)}", f"# n_removed={len(removed_ids)}"]
    lines += [str(int(i)) for i in removed_ids]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    meta, ids = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            try:
                ids.append(int(line))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: expected an example id") from None
    return meta, np.array(ids, dtype=np.int64)
