"""Training runs with per-epoch profiling, gap metrics and the controlled
removal / half-split / multi-evaluator experiments."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks
from .attacks import AttackConfig
from .datasets import REMOVAL_MODES, Dataset, class_balanced_halves, removal_ids
from .nn import SGD, Network, TrainConfig, forward, mlp, softmax
from .objectives import ObjectiveConfig, objective_loss
from .profiler import ProfileRecords, QualityRanking

log = logging.getLogger(__name__)

STABILITY_SOURCES = ("fresh", "on_the_fly")


def digest(obj) -> str:
    """Short sha256 of a JSON-able object with sorted keys."""
    text = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


@dataclass
class RunResult:
    objective: str
    seed: int
    clean_train_acc: np.ndarray
    robust_train_acc: np.ndarray
    clean_test_acc: np.ndarray
    robust_test_acc: np.ndarray
    best_epoch: int | None
    best_model: Network
    last_model: Network
    records: ProfileRecords | None
    test_digest: str
    config_digest: str
    train_size: int = 0

    @property
    def epochs(self) -> int:
        return len(self.robust_test_acc)

    @property
    def best_robust(self) -> float:
        return float(self.robust_test_acc[self.best_epoch]) if self.epochs else float("nan")

    @property
    def last_robust(self) -> float:
        return float(self.robust_test_acc[-1]) if self.epochs else float("nan")

    @property
    def last_clean(self) -> float:
        return float(self.clean_test_acc[-1]) if self.epochs else float("nan")

    def to_dict(self):
        return {
            "objective": self.objective,
            "seed": int(self.seed),
            "train_size": int(self.train_size),
            "best_epoch": self.best_epoch,
            "clean_train_acc": [float(v) for v in self.clean_train_acc],
            "robust_train_acc": [float(v) for v in self.robust_train_acc],
            "clean_test_acc": [float(v) for v in self.clean_test_acc],
            "robust_test_acc": [float(v) for v in self.robust_test_acc],
            "test_digest": self.test_digest,
            "config_digest": self.config_digest,
        }


def _accuracy(net: Network, X, Y) -> float:
    return float(np.mean(forward(net, X).argmax(axis=1) == Y))


def train_run(train: Dataset, test: Dataset, train_cfg: TrainConfig, objective_cfg: ObjectiveConfig,
              eval_attack: AttackConfig, seed: int | None = None,
              stability_source: str | None = "fresh") -> RunResult:
    """Train from a seeded init, logging train dynamics and test accuracy each epoch.

    ``stability_source`` picks how robust correctness of training examples
    is logged: ``"fresh"`` re-attacks every example against the end-of-epoch
    model with ``eval_attack``, ``"on_the_fly"`` reuses the training
    perturbations, ``None`` skips the per-example log.
    """
    train_cfg.validate()
    objective_cfg.validate()
    eval_attack.validate("eval_attack")
    if stability_source not in (*STABILITY_SOURCES, None):
        raise ValueError(f"unknown stability source {stability_source!r}")
    if np.intersect1d(train.ids, test.ids).size:
        raise ValueError("train and test sets share example ids")
    seed = train_cfg.seed if seed is None else int(seed)
    cfg_digest = digest({"train": train_cfg, "objective": objective_cfg, "eval": eval_attack,
                         "seed": seed, "train_data": train.digest(),
                         "stability_source": stability_source})
    net = mlp(train.dim, train.classes, train_cfg.hidden, seed=[seed, 10])
    opt = SGD(net, train_cfg)
    shuffle_rng = np.random.default_rng([seed, 11])
    attack_rng = np.random.default_rng([seed, 12])
    T, n = train_cfg.epochs, len(train)
    Xtr, Ytr = train.X, train.y
    records = ProfileRecords(train.ids, T) if stability_source else None
    hist = {k: np.zeros(T) for k in ("ct", "rt", "cs", "rs")}
    best_epoch, best_model = None, net.copy()
    rows = np.arange(n)
    for epoch in range(T):
        seen = np.zeros(n, dtype=bool)
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            res = objective_loss(net, Xtr[idx], Ytr[idx], objective_cfg, attack_rng)
            opt.step(net, res.grads, epoch)
            seen[idx] = res.robust_correct
        eval_rng = np.random.default_rng([seed, 13, epoch])
        P = softmax(forward(net, Xtr))
        hist["ct"][epoch] = np.mean(P.argmax(axis=1) == Ytr)
        if stability_source == "on_the_fly":
            robust_correct = seen
        else:
            robust_correct = ~attacks.pgd(net, Xtr, Ytr, eval_attack, eval_rng).success
        hist["rt"][epoch] = robust_correct.mean()
        if records is not None:
            records.log(epoch, robust_correct, P[rows, Ytr])
        hist["cs"][epoch] = _accuracy(net, test.X, test.y)
        hist["rs"][epoch] = attacks.robust_accuracy(attacks.pgd(net, test.X, test.y, eval_attack, eval_rng))
        if best_epoch is None or hist["rs"][epoch] > hist["rs"][best_epoch]:
            best_epoch, best_model = epoch, net.copy()
    return RunResult(objective_cfg.kind, seed, hist["ct"], hist["rt"], hist["cs"], hist["rs"],
                     best_epoch, best_model, net.copy(), records, test.digest(), cfg_digest, n)


@dataclass
class GapReport:
    robust_overfitting_gap: float
    overestimation_gap: float
    cross_generalization_gap: float
    condition: dict = field(default_factory=dict)

    def to_dict(self):
        return {"robust_overfitting_gap": self.robust_overfitting_gap,
                "overestimation_gap": self.overestimation_gap,
                "cross_generalization_gap": self.cross_generalization_gap,
                "condition": self.condition}


def overestimation_gap(pgd_accuracy: float, strong_accuracy: float) -> float:
    return float(pgd_accuracy - strong_accuracy)


def compute_gaps(adv_run: RunResult, std_run: RunResult | None, strong_accuracy: float | None,
                 pgd_accuracy: float | None = None, condition: dict | None = None) -> GapReport:
    """Overfitting (best - last robust test accuracy), overestimation (PGD
    minus strong-evaluator accuracy) and cross-generalization (standard minus
    adversarial clean test accuracy at the last epoch)."""
    if std_run is not None and std_run.test_digest != adv_run.test_digest:
        raise ValueError("adversarial and standard runs were evaluated on different test sets")
    if adv_run.epochs == 0:
        overfit = 0.0
    else:
        overfit = adv_run.best_robust - adv_run.last_robust
    if strong_accuracy is None:
        over = float("nan")
    else:
        if pgd_accuracy is None:
            pgd_accuracy = adv_run.best_robust
        over = overestimation_gap(pgd_accuracy, strong_accuracy)
    if std_run is None or adv_run.epochs == 0 or std_run.epochs == 0:
        cross = float("nan") if std_run is None else 0.0
    else:
        cross = std_run.last_clean - adv_run.last_clean
    return GapReport(float(overfit), over, float(cross), dict(condition or {}))


@dataclass(frozen=True)
class EvaluatorSuite:
    """Evaluator settings, scaled off the evaluation attack."""
    long_iterations: int = 200
    restarts: int = 5
    square_queries: int = 1000
    square_p_init: float = 0.3


def evaluator_configs(eval_attack: AttackConfig, suite: EvaluatorSuite):
    base = replace(eval_attack, restarts=1, target_class=None)
    return {
        "pgd10": base,
        "pgd_long": replace(base, iterations=suite.long_iterations),
        "pgd_multi_restart": replace(base, restarts=suite.restarts, random_start=True),
    }


def overestimation_eval(model: Network, test: Dataset, eval_attack: AttackConfig,
                        suite: EvaluatorSuite = EvaluatorSuite(), seed: int = 0,
                        surrogate: Network | None = None, evaluators=None) -> dict:
    """Robust test accuracy per evaluator on the same test set.

    Evaluators: ``clean``, ``pgd10``, ``pgd_long``, ``pgd_multi_restart``,
    ``square`` and, with a surrogate, ``transfer``; ``strong`` is the
    minimum of the restarted PGD and square results. All evaluators start
    from the same seed, so restart 0 of ``pgd_multi_restart`` replays
    ``pgd10``.
    """
    wanted = set(evaluators or ("pgd10", "pgd_long", "pgd_multi_restart", "square", "transfer"))
    X, Y = test.X, test.y
    cfgs = evaluator_configs(eval_attack, suite)
    out = {"clean": _accuracy(model, X, Y)}
    for name in ("pgd10", "pgd_long"):
        if name in wanted:
            out[name] = attacks.robust_accuracy(attacks.pgd(model, X, Y, cfgs[name], seed))
    if "pgd_multi_restart" in wanted:
        out["pgd_multi_restart"] = attacks.robust_accuracy(
            attacks.pgd_multi_restart(model, X, Y, cfgs["pgd_multi_restart"], seed))
    if "square" in wanted:
        out["square"] = attacks.robust_accuracy(attacks.square_patch_attack(
            model, X, Y, eval_attack.epsilon, suite.square_queries, seed, suite.square_p_init))
    if "transfer" in wanted and surrogate is not None:
        out["transfer"] = attacks.robust_accuracy(attacks.transfer_attack(
            surrogate, model, X, Y, cfgs["pgd10"], seed))
    strong = [out[k] for k in ("pgd_multi_restart", "square") if k in out]
    if strong:
        out["strong"] = min(strong)
    return out


@dataclass
class Condition:
    fraction: float
    mode: str
    seed: int
    removed: int
    class_counts: list
    adv_run: RunResult
    std_run: RunResult
    evaluations: dict
    gaps: GapReport

    def to_dict(self):
        return {"fraction": self.fraction, "mode": self.mode, "seed": self.seed,
                "removed": self.removed, "class_counts": self.class_counts,
                "adv_run": self.adv_run.to_dict(), "std_run": self.std_run.to_dict(),
                "evaluations": self.evaluations, "gaps": self.gaps.to_dict()}


@dataclass
class ExperimentSettings:
    train: TrainConfig
    objective: ObjectiveConfig
    eval_attack: AttackConfig
    evaluators: EvaluatorSuite = EvaluatorSuite()
    classwise_removal: bool = False

    def std_objective(self) -> ObjectiveConfig:
        return replace(self.objective, kind="standard")


def run_condition(train: Dataset, test: Dataset, pruned: Dataset, fraction: float, mode: str,
                  seed: int, settings: ExperimentSettings) -> Condition:
    adv = train_run(pruned, test, settings.train, settings.objective, settings.eval_attack,
                    seed, stability_source=None)
    std = train_run(pruned, test, settings.train, settings.std_objective(), settings.eval_attack,
                    seed, stability_source=None)
    evals = overestimation_eval(adv.best_model, test, settings.eval_attack, settings.evaluators,
                                seed, evaluators=("pgd10", "pgd_multi_restart", "square"))
    cond = {"fraction": fraction, "mode": mode, "objective": settings.objective.kind, "seed": seed}
    gaps = compute_gaps(adv, std, evals["strong"], evals["pgd10"], cond)
    return Condition(fraction, mode, seed, len(train) - len(pruned),
                     pruned.class_counts().tolist(), adv, std, evals, gaps)


def _run_condition_job(args):
    return run_condition(*args)


def removal_curve(train: Dataset, test: Dataset, ranking: QualityRanking, fractions, modes,
                  settings: ExperimentSettings, seeds, workers: int = 1) -> list[Condition]:
    """One adversarial run, matching standard run and strong evaluation per
    (fraction, mode, seed). Conditions with identical training subsets share
    one computation."""
    fractions = [float(f) for f in fractions]
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be sorted ascending")
    if any(not 0 <= f < 1 for f in fractions):
        raise ValueError("fractions must lie in [0, 1)")
    for m in modes:
        if m not in REMOVAL_MODES:
            raise ValueError(f"unknown removal mode {m!r}")
    plan, jobs, keys = [], {}, []
    for f in fractions:
        for m in modes:
            for s in seeds:
                removed = removal_ids(train, ranking, f, m, s, settings.classwise_removal)
                pruned = train.without(removed)
                key = (pruned.digest(), int(s))
                plan.append((f, m, int(s), key))
                if key not in jobs:
                    jobs[key] = (train, test, pruned, f, m, int(s), settings)
                    keys.append(key)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = dict(zip(keys, pool.map(_run_condition_job, [jobs[k] for k in keys])))
    else:
        done = {k: run_condition(*jobs[k]) for k in keys}
    out = []
    for f, m, s, key in plan:
        c = done[key]
        cond = {"fraction": f, "mode": m, "objective": settings.objective.kind, "seed": s}
        out.append(replace(c, fraction=f, mode=m, gaps=replace(c.gaps, condition=cond)))
    return out


def half_split_demo(train: Dataset, test: Dataset, ranking: QualityRanking,
                    settings: ExperimentSettings, seeds) -> dict:
    """Standard and adversarial training on each class-balanced quality half."""
    high, low = class_balanced_halves(train, ranking)
    out = {"sizes": {"high": len(high), "low": len(low)},
           "class_counts": {"high": high.class_counts().tolist(), "low": low.class_counts().tolist()},
           "halves": {}}
    for name, half in (("high", high), ("low", low)):
        runs = []
        for s in seeds:
            adv = train_run(half, test, settings.train, settings.objective, settings.eval_attack,
                            s, stability_source=None)
            std = train_run(half, test, settings.train, settings.std_objective(),
                            settings.eval_attack, s, stability_source=None)
            gaps = compute_gaps(adv, std, None, condition={"half": name, "seed": int(s)})
            runs.append({"seed": int(s), "adv_run": adv, "std_run": std, "gaps": gaps})
        out["halves"][name] = runs
    return out
