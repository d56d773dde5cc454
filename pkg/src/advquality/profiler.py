"""Per-example training-dynamics logs and the quality measures built on them.

Records are stored column-wise (epochs x examples); indexing a
:class:`ProfileRecords` yields the per-example :class:`ExampleRecord` view.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stats
from .attacks import AttackConfig, pgd
from .nn import Network, forward, softmax

MEASURES = ("stability", "probability", "min_perturbation", "learning_order")
# measures where a larger score means lower quality
_HIGH_IS_LOW = {"learning_order"}

PROFILE_COLUMNS = ("id", "label", "stability", "first_learned_epoch", "probability",
                   "min_perturbation", "quality_rank")


@dataclass
class ExampleRecord:
    example_id: int
    robust_correct: np.ndarray
    clean_true_prob: np.ndarray
    min_perturbation: float | None = None


class ProfileRecords:
    def __init__(self, ids, epochs: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.epochs = int(epochs)
        n = len(self.ids)
        self.robust_correct = np.zeros((self.epochs, n), dtype=bool)
        self.clean_true_prob = np.zeros((self.epochs, n))
        self.min_perturbation = None
        self.completed = 0

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> ExampleRecord:
        t = self.completed
        mp = None if self.min_perturbation is None else float(self.min_perturbation[i])
        return ExampleRecord(int(self.ids[i]), self.robust_correct[:t, i].copy(),
                             self.clean_true_prob[:t, i].copy(), mp)

    def log(self, epoch: int, robust_correct, clean_true_prob):
        if epoch != self.completed or epoch >= self.epochs:
            raise ValueError(f"epoch {epoch} out of order (completed {self.completed} of {self.epochs})")
        self.robust_correct[epoch] = robust_correct
        self.clean_true_prob[epoch] = clean_true_prob
        self.completed += 1
        return self


def save_records(path, records: ProfileRecords):
    """JSON log of the completed epochs; floats round-trip exactly."""
    t = records.completed
    doc = {
        "ids": [int(i) for i in records.ids],
        "epochs": records.epochs,
        "completed": t,
        "robust_correct": ["".join("1" if v else "0" for v in row) for row in records.robust_correct[:t]],
        "clean_true_prob": [[float(v) for v in row] for row in records.clean_true_prob[:t]],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_records(path) -> ProfileRecords:
    doc = json.loads(Path(path).read_text())
    try:
        rec = ProfileRecords(doc["ids"], doc["epochs"])
        for epoch, (rc, prob) in enumerate(zip(doc["robust_correct"], doc["clean_true_prob"])):
            if len(rc) != len(rec) or len(prob) != len(rec):
                raise ValueError(f"epoch {epoch} has the wrong number of examples")
            rec.log(epoch, np.frombuffer(rc.encode(), dtype=np.uint8) == ord("1"), prob)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed records file ({exc})") from None
    return rec


def record_epoch(records: ProfileRecords, epoch: int, net: Network, X, Y,
                 eval_attack: AttackConfig, seed=0) -> ProfileRecords:
    """Re-attack every training example against the epoch snapshot."""
    Y = np.asarray(Y, dtype=np.int64)
    P = softmax(forward(net, X))
    out = pgd(net, X, Y, eval_attack, seed)
    return records.log(epoch, ~out.success, P[np.arange(len(Y)), Y])


def stability(record: ExampleRecord, T: int | None = None) -> float:
    """Fraction of epochs in which the example stayed robustly correct."""
    T = len(record.robust_correct) if T is None else T
    if T == 0:
        raise ValueError("stability is undefined for zero epochs")
    return float(np.count_nonzero(record.robust_correct[:T]) / T)


def stability_scores(records: ProfileRecords, window: tuple[int, int] | None = None):
    lo, hi = window if window is not None else (0, records.completed)
    if hi <= lo:
        raise ValueError("stability is undefined for zero epochs")
    return records.robust_correct[lo:hi].mean(axis=0)


def first_learned_epoch(record: ExampleRecord) -> int | None:
    hits = np.flatnonzero(record.robust_correct)
    return int(hits[0]) if hits.size else None


def first_learned_epochs(records: ProfileRecords):
    """Vectorised first-learned epoch; -1 when never learned."""
    rc = records.robust_correct[:records.completed]
    learned = rc.any(axis=0)
    return np.where(learned, rc.argmax(axis=0), -1)


def prediction_probability(records: ProfileRecords, best_epoch: int):
    if best_epoch is None or not 0 <= best_epoch < records.completed:
        raise ValueError(f"best epoch {best_epoch} not recorded (completed {records.completed})")
    return records.clean_true_prob[best_epoch].copy()


@dataclass
class QualityRanking:
    ids: np.ndarray
    ranks: np.ndarray
    measure: str = "stability"
    ensemble_size: int = 1

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.ranks = np.asarray(self.ranks, dtype=np.float64)

    def __len__(self):
        return len(self.ids)

    def aligned(self, ids):
        """Ranks reordered to follow ``ids``."""
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(self.ids, kind="stable")
        known = self.ids[order]
        pos = np.searchsorted(known, ids)
        if (len(ids) != len(known) or np.any(pos >= len(known))
                or not np.array_equal(known[pos], ids)):
            raise ValueError("ranking and example ids do not match")
        return self.ranks[order][pos]

    def ordinal(self):
        """Tie-free ranks 1..n (identity before ensembling)."""
        return stats.ordinal_ranks(self.ranks, self.ids)


def quality_rank(scores, ids=None, measure: str = "stability", high_is_low: bool | None = None) -> QualityRanking:
    """Rank 1 is the lowest-quality example; ties go to the smaller id."""
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot rank an empty set of examples")
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids, dtype=np.int64)
    if high_is_low is None:
        high_is_low = measure in _HIGH_IS_LOW
    ranks = stats.ordinal_ranks(scores, ids, descending=high_is_low)
    return QualityRanking(ids, ranks.astype(np.float64), measure, 1)


def learning_order_scores(records: ProfileRecords):
    """First-learned epoch, with never-learned examples placed after the last epoch."""
    first = first_learned_epochs(records)
    return np.where(first < 0, records.completed, first).astype(np.float64)


def ensemble_rank(rankings: list[QualityRanking]) -> QualityRanking:
    """Mean rank per example over independent runs."""
    if not rankings:
        raise ValueError("need at least one ranking")
    base = rankings[0]
    ids = np.sort(base.ids)
    total = np.zeros(len(ids))
    for r in rankings:
        if r.measure != base.measure:
            raise ValueError(f"cannot ensemble {r.measure!r} with {base.measure!r}")
        total += r.aligned(ids)
    size = sum(r.ensemble_size for r in rankings)
    return QualityRanking(ids, total / len(rankings), base.measure, size)


def spearman(a: QualityRanking, b: QualityRanking) -> float:
    """Spearman rho between two rankings over the same ids."""
    ids = np.sort(a.ids)
    ra = QualityRanking(ids, a.aligned(ids), a.measure).ordinal()
    rb = QualityRanking(ids, b.aligned(ids), b.measure).ordinal()
    return stats.spearman_from_ranks(ra, rb)


def write_profile(path, ids, labels, stability_, first_learned, probability,
                  min_perturbation=None, ranking: QualityRanking | None = None):
    n = len(ids)
    mp = np.full(n, -1.0) if min_perturbation is None else np.asarray(min_perturbation)
    qr = ranking.aligned(ids) if ranking is not None else np.full(n, -1.0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for i in range(n):
            w.writerow([int(ids[i]), int(labels[i]), repr(float(stability_[i])),
                        int(first_learned[i]), repr(float(probability[i])),
                        repr(float(mp[i])), repr(float(qr[i]))])


def read_profile(path):
    """Column dict of numpy arrays keyed by :data:`PROFILE_COLUMNS`."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PROFILE_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(PROFILE_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(PROFILE_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(PROFILE_COLUMNS)} fields")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(PROFILE_COLUMNS))
    out = {c: arr[:, j] for j, c in enumerate(PROFILE_COLUMNS)}
    for c in ("id", "label", "first_learned_epoch"):
        out[c] = out[c].astype(np.int64)
    return out


def ranking_from_profile(profile: dict, measure: str = "stability") -> QualityRanking:
    ids = profile["id"]
    if measure == "stability":
        scores = profile["stability"]
    elif measure == "probability":
        scores = profile["probability"]
    elif measure == "min_perturbation":
        if np.any(profile["min_perturbation"] < 0):
            raise ValueError("profile has no minimum-perturbation column values")
        scores = profile["min_perturbation"]
    elif measure == "learning_order":
        fl = profile["first_learned_epoch"].astype(np.float64)
        scores = np.where(fl < 0, np.inf, fl)
    else:
        raise ValueError(f"unknown measure {measure!r}")
    return quality_rank(scores, ids, measure)


def write_ranking(path, ranking: QualityRanking):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "quality_rank", "measure", "ensemble_size"])
        for i, r in zip(ranking.ids, ranking.ranks):
            w.writerow([int(i), repr(float(r)), ranking.measure, ranking.ensemble_size])


def read_ranking(path) -> QualityRanking:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "quality_rank", "measure", "ensemble_size"]:
            raise ValueError(f"{path}: not a ranking file")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty ranking")
    ids = [int(r[0]) for r in rows]
    ranks = [float(r[1]) for r in rows]
    return QualityRanking(np.array(ids), np.array(ranks), rows[0][2], int(rows[0][3]))
