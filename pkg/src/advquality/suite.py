"""End-to-end experiment suite on one config: profiling, ranking, removal
curve, half split and the multi-evaluator comparison, reduced into a single
deterministic report."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import attacks, profiler, stats
from .config import CliConfig
from .datasets import Dataset, generate_synthetic, stratified_split
from .experiments import (ExperimentSettings, RunResult, compute_gaps, digest, half_split_demo,
                          overestimation_eval, removal_curve, train_run)
from .profiler import QualityRanking

log = logging.getLogger(__name__)

FLAT_COLUMNS = ("fraction", "mode", "seed", "best_robust", "last_robust",
                "robust_overfitting_gap", "overestimation_gap", "cross_generalization_gap")


@dataclass
class ProfileResult:
    runs: list
    rankings: list
    ensemble: QualityRanking
    stability: np.ndarray


def make_data(cfg: CliConfig):
    ds, ambiguity = generate_synthetic(cfg.data.synthetic)
    train, test = stratified_split(ds, cfg.data.test_fraction, cfg.data.split_seed)
    return ds, ambiguity, train, test


def settings(cfg: CliConfig, kind: str | None = None) -> ExperimentSettings:
    return ExperimentSettings(cfg.train, cfg.objective_config(kind), cfg.eval.attack,
                              cfg.eval.evaluators, cfg.experiment.classwise_removal)


def profile_runs(cfg: CliConfig, train: Dataset, test: Dataset) -> ProfileResult:
    """Profiled adversarial runs, one per profile seed, and their ensemble ranking."""
    runs, rankings = [], []
    for s in cfg.experiment.profile_seeds:
        run = train_run(train, test, cfg.train, cfg.objective_config(), cfg.eval.attack, s,
                        stability_source=cfg.experiment.stability_source)
        runs.append(run)
        rankings.append(measure_ranking(run, cfg, train))
    ens = profiler.ensemble_rank(rankings)
    stab = np.mean([profiler.stability_scores(r.records) for r in runs], axis=0)
    return ProfileResult(runs, rankings, ens, stab)


def measure_scores(run: RunResult, cfg: CliConfig, train: Dataset, measure: str):
    rec = run.records
    if measure == "stability":
        return profiler.stability_scores(rec)
    if measure == "probability":
        return profiler.prediction_probability(rec, run.best_epoch)
    if measure == "learning_order":
        return profiler.learning_order_scores(rec)
    if measure == "min_perturbation":
        eps, _ = attacks.min_perturbation(run.best_model, train.X, train.y,
                                          cfg.eval.min_perturbation_step, cfg.eval.min_perturbation_max)
        return eps
    raise ValueError(f"unknown measure {measure!r}")


def measure_ranking(run: RunResult, cfg: CliConfig, train: Dataset, measure: str | None = None):
    measure = measure or cfg.experiment.measure
    return profiler.quality_rank(measure_scores(run, cfg, train, measure), train.ids, measure)


def _clean(obj):
    """Recursively swap NaN for None so the report stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_bytes(report: dict) -> bytes:
    return (json.dumps(_clean(report), sort_keys=True, indent=1) + "\n").encode()


def flat_rows(report: dict):
    rows = []
    for c in report["removal_curve"]:
        adv = c["adv_run"]
        best = adv["robust_test_acc"][adv["best_epoch"]] if adv["best_epoch"] is not None else float("nan")
        last = adv["robust_test_acc"][-1] if adv["robust_test_acc"] else float("nan")
        rows.append({"fraction": c["fraction"], "mode": c["mode"], "seed": c["seed"],
                     "best_robust": best, "last_robust": last, **{
                         k: c["gaps"][k] for k in FLAT_COLUMNS[5:]}})
    return rows


def flat_table_bytes(rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLAT_COLUMNS)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in FLAT_COLUMNS)])
    return buf.getvalue().encode()


def _mean(values):
    return stats.aggregate(values).mean


def run_suite(cfg: CliConfig, workers: int = 1, timings: dict | None = None) -> dict:
    """Everything the directional claims need, in one report dictionary.

    ``timings``, when given, receives wall-clock seconds per phase; they stay
    out of the report so its bytes remain reproducible.
    """
    cfg.validate()
    timings = {} if timings is None else timings
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    ex = cfg.experiment
    ds, ambiguity, train, test = make_data(cfg)
    amb_train = ambiguity[np.isin(ds.ids, train.ids)]
    log.info("profiling %d runs", len(ex.profile_seeds))
    prof = profile_runs(cfg, train, test)
    ranking = prof.ensemble
    lap("profiling")

    # consistency and oracle agreement of the stability ranking
    consistency = None
    if len(prof.rankings) >= 2:
        consistency = profiler.spearman(prof.rankings[0], prof.rankings[1])
    stab_rank = ranking.aligned(train.ids)
    # negated so that, like a quality rank, the most ambiguous example ranks first
    amb_quality = -amb_train
    amb_rho = stats.spearman(stab_rank, amb_quality)
    amb_p = stats.permutation_test(stab_rank, amb_quality, shuffles=ex.permutation_shuffles,
                                   seed=[cfg.train.seed, 5])
    first = prof.runs[0]
    cross = {}
    base = measure_ranking(first, cfg, train, "stability")
    for m in profiler.MEASURES:
        if m != "stability":
            cross[m] = profiler.spearman(base, measure_ranking(first, cfg, train, m))
    lap("ranking_checks")

    log.info("removal curve")
    sets = settings(cfg)
    curve = removal_curve(train, test, ranking, ex.fractions, ex.modes, sets, ex.seeds, workers)
    lap("removal_curve")
    log.info("half split")
    halves = half_split_demo(train, test, ranking, sets, ex.half_split_seeds)
    lap("half_split")

    log.info("evaluator comparison")
    surrogate = train_run(train, test, cfg.train, cfg.objective_config("pgd_at"), cfg.eval.attack,
                          ex.surrogate_seed, stability_source=None).best_model
    reuse = {(c.seed, c.adv_run.objective): c.adv_run for c in curve if c.removed == 0}
    over = {}
    for kind in ex.overestimation_objectives:
        rows = []
        for s in ex.seeds:
            run = reuse.get((s, kind))
            if run is None:
                run = train_run(train, test, cfg.train, cfg.objective_config(kind), cfg.eval.attack,
                                s, stability_source=None)
            table = overestimation_eval(run.best_model, test, cfg.eval.attack, cfg.eval.evaluators,
                                        s, surrogate)
            gaps = compute_gaps(run, None, table["strong"], table["pgd10"],
                                {"fraction": 0.0, "mode": "none", "objective": kind, "seed": s})
            spread = max(v for k, v in table.items() if k != "clean") - \
                min(v for k, v in table.items() if k != "clean")
            rows.append({"seed": s, "run": run.to_dict(), "evaluations": table,
                         "gaps": gaps.to_dict(), "evaluator_spread": spread})
        over[kind] = rows
    lap("overestimation")

    report = {
        "config": cfg.to_dict(),
        "config_digest": digest(cfg.to_dict()),
        "data": {"dataset_digest": ds.digest(), "train_digest": train.digest(),
                 "test_digest": test.digest(), "train_size": len(train), "test_size": len(test)},
        "profiling": {
            "runs": [r.to_dict() for r in prof.runs],
            "stability_spearman": consistency,
            "ambiguity_spearman": amb_rho,
            "ambiguity_p_value": amb_p,
            "cross_measure_spearman": cross,
            "ranking_digest": digest({"ids": ranking.ids, "ranks": ranking.ranks}),
            "stability_histogram": np.histogram(prof.stability, bins=10, range=(0, 1))[0].tolist(),
        },
        "removal_curve": [c.to_dict() for c in curve],
        "half_split": {
            "sizes": halves["sizes"], "class_counts": halves["class_counts"],
            "halves": {h: [{"seed": r["seed"], "adv_run": r["adv_run"].to_dict(),
                            "std_run": r["std_run"].to_dict(), "gaps": r["gaps"].to_dict()}
                           for r in runs] for h, runs in halves["halves"].items()},
        },
        "overestimation": over,
    }
    report["summary"] = summarize(report)
    return report


def _curve_mean(report, fraction, mode, key):
    vals = [c for c in report["removal_curve"] if c["fraction"] == fraction and c["mode"] == mode]
    if not vals:
        return None
    if key == "best_robust":
        return _mean(c["adv_run"]["robust_test_acc"][c["adv_run"]["best_epoch"]] for c in vals)
    return _mean(c["gaps"][key] for c in vals)


def summarize(report: dict) -> dict:
    """Seed means behind each directional comparison."""
    prof = report["profiling"]
    out = {
        "stability_spearman": prof["stability_spearman"],
        "ambiguity_p_value": prof["ambiguity_p_value"],
    }
    for f in sorted({c["fraction"] for c in report["removal_curve"]}):
        for m in sorted({c["mode"] for c in report["removal_curve"]}):
            tag = f"{m}@{f!r}"
            out[f"best_robust[{tag}]"] = _curve_mean(report, f, m, "best_robust")
            out[f"robust_overfitting_gap[{tag}]"] = _curve_mean(report, f, m, "robust_overfitting_gap")
            out[f"cross_generalization_gap[{tag}]"] = _curve_mean(report, f, m, "cross_generalization_gap")
            out[f"overestimation_gap[{tag}]"] = _curve_mean(report, f, m, "overestimation_gap")
    for h, runs in report["half_split"]["halves"].items():
        out[f"half_overfitting_gap[{h}]"] = _mean(r["gaps"]["robust_overfitting_gap"] for r in runs)
        out[f"half_std_clean[{h}]"] = _mean(r["std_run"]["clean_test_acc"][-1] for r in runs)
    restart_ok = True
    for kind, rows in report["overestimation"].items():
        out[f"overestimation_gap[{kind}]"] = _mean(r["gaps"]["overestimation_gap"] for r in rows)
        out[f"evaluator_spread[{kind}]"] = _mean(r["evaluator_spread"] for r in rows)
        restart_ok &= all(r["evaluations"]["pgd_multi_restart"] <= r["evaluations"]["pgd10"] for r in rows)
    for c in report["removal_curve"]:
        restart_ok &= c["evaluations"]["pgd_multi_restart"] <= c["evaluations"]["pgd10"]
    out["multi_restart_le_pgd10_everywhere"] = restart_ok
    return out
