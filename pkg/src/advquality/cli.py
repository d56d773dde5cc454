"""Command-line driver: one config file, per-command flag overrides.

Exit codes: 0 success, 1 validation error (bad config, flags, inputs or an
existing output without ``--overwrite``), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, datasets, profiler, stats
from .config import CONFIG_ENV, CliConfig, ConfigError, load_config
from .experiments import digest, overestimation_eval, train_run
from .nn import load_checkpoint, save_checkpoint
from .objectives import KINDS

log = logging.getLogger("advquality")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV}, then built-in defaults)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advquality", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and its train/test split")
    _common(p)

    p = sub.add_parser("train", help="train one model with per-epoch profiling")
    _common(p)
    p.add_argument("--train", help="training set (default: OUT/train.csv)")
    p.add_argument("--test", help="test set (default: OUT/test.csv)")
    p.add_argument("--objective", choices=KINDS, help="override objective.kind")

    p = sub.add_parser("profile", help="turn a run's records into a per-example profile")
    _common(p)
    p.add_argument("--run", help="run directory (default: OUT/run_seed<seed>)")
    p.add_argument("--train", help="training set (default: OUT/train.csv)")

    p = sub.add_parser("rank", help="ensemble quality ranking from profiles")
    _common(p)
    p.add_argument("--profiles", nargs="+", help="profile files (default: OUT/profile_seed*.csv)")
    p.add_argument("--measure", choices=profiler.MEASURES, help="override experiment.measure")

    p = sub.add_parser("split", help="class-balanced high/low quality halves")
    _common(p)
    p.add_argument("--train", help="training set (default: OUT/train.csv)")
    p.add_argument("--ranking", help="ranking file (default: OUT/ranking.csv)")

    p = sub.add_parser("prune", help="remove a fraction of the training set")
    _common(p)
    p.add_argument("--train", help="training set (default: OUT/train.csv)")
    p.add_argument("--ranking", help="ranking file (default: OUT/ranking.csv)")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--mode", choices=datasets.REMOVAL_MODES, required=True)

    p = sub.add_parser("curve", help="run the full experiment suite and write the report")
    _common(p)

    p = sub.add_parser("eval-attacks", help="robust accuracy of a checkpoint per evaluator")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", help="test set (default: OUT/test.csv)")
    p.add_argument("--surrogate", help="checkpoint used for the transfer attack")

    p = sub.add_parser("spearman", help="Spearman correlation of two rankings")
    _common(p)
    p.add_argument("rankings", nargs=2)
    p.add_argument("--shuffles", type=int, default=0, help="permutation-test shuffles (0 skips the test)")

    p = sub.add_parser("report", help="summarise a suite report")
    _common(p)
    p.add_argument("--report", help="report file (default: OUT/report.json)")
    return parser


def _config(args) -> CliConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if getattr(args, "objective", None):
        cfg.objective = dataclasses.replace(cfg.objective, kind=args.objective)
    if getattr(args, "measure", None):
        cfg.experiment = dataclasses.replace(cfg.experiment, measure=args.measure)
    if args.workers < 1:
        raise ConfigError("--workers: must be at least 1")
    return cfg.validate()


def _outputs(args, *paths):
    """Refuse to clobber existing outputs unless asked to."""
    if not args.overwrite:
        for p in paths:
            if Path(p).exists():
                raise UsageError(f"{p} exists; pass --overwrite to replace it")
    for p in paths:
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    return paths


def _input(path):
    if not Path(path).exists():
        raise UsageError(f"missing input file {path}")
    return path


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def cmd_gen_data(args, cfg, out):
    files = _outputs(args, out / "dataset.csv", out / "train.csv", out / "test.csv", out / "ambiguity.csv")
    ds, amb = datasets.generate_synthetic(cfg.data.synthetic)
    train, test = datasets.stratified_split(ds, cfg.data.test_fraction, cfg.data.split_seed)
    datasets.save_delimited(ds, files[0])
    datasets.save_delimited(train, files[1])
    datasets.save_delimited(test, files[2])
    with open(files[3], "w") as fh:
        fh.write("id,ambiguity\n")
        for i, a in zip(ds.ids, amb):
            fh.write(f"{int(i)},{float(a)!r}\n")
    print(f"wrote {len(train)} train and {len(test)} test examples to {out}")


def cmd_train(args, cfg, out):
    train = datasets.load_delimited(_input(args.train or out / "train.csv"))
    test = datasets.load_delimited(_input(args.test or out / "test.csv"))
    seed = cfg.train.seed
    run_dir = out / f"run_seed{seed}"
    files = _outputs(args, run_dir / "run.json", run_dir / "best.json", run_dir / "last.json",
                     run_dir / "records.json")
    run = train_run(train, test, cfg.train, cfg.objective_config(), cfg.eval.attack, seed,
                    stability_source=cfg.experiment.stability_source)
    doc = run.to_dict()
    doc["config_digest"] = digest(cfg.to_dict())
    _write_json(files[0], doc)
    save_checkpoint(files[1], run.best_model, cfg.train)
    save_checkpoint(files[2], run.last_model, cfg.train)
    profiler.save_records(files[3], run.records)
    if run.epochs:
        print(f"best epoch {run.best_epoch}: robust test accuracy {run.best_robust:.4f} "
              f"(last {run.last_robust:.4f})")


def cmd_profile(args, cfg, out):
    run_dir = Path(args.run) if args.run else out / f"run_seed{cfg.train.seed}"
    train = datasets.load_delimited(_input(args.train or out / "train.csv"))
    meta = json.loads(Path(_input(run_dir / "run.json")).read_text())
    records = profiler.load_records(_input(run_dir / "records.json"))
    best = load_checkpoint(_input(run_dir / "best.json"))[0]
    (target,) = _outputs(args, out / f"profile_seed{meta['seed']}.csv")
    if not np.array_equal(records.ids, train.ids):
        raise UsageError("records and training set ids differ")
    if records.completed == 0:
        raise UsageError("run has no recorded epochs")
    stab = profiler.stability_scores(records)
    prob = profiler.prediction_probability(records, meta["best_epoch"])
    eps, _ = attacks.min_perturbation(best, train.X, train.y, cfg.eval.min_perturbation_step,
                                      cfg.eval.min_perturbation_max)
    ranking = profiler.quality_rank(stab, train.ids, "stability")
    profiler.write_profile(target, train.ids, train.y, stab, profiler.first_learned_epochs(records),
                           prob, eps, ranking)
    print(f"profiled {len(train)} examples into {target}")


def cmd_rank(args, cfg, out):
    paths = args.profiles or sorted(str(p) for p in out.glob("profile_seed*.csv"))
    if not paths:
        raise UsageError(f"no profiles found in {out}")
    (target,) = _outputs(args, out / "ranking.csv")
    rankings = [profiler.ranking_from_profile(profiler.read_profile(_input(p)), cfg.experiment.measure)
                for p in paths]
    profiler.write_ranking(target, profiler.ensemble_rank(rankings))
    print(f"ranked {len(rankings[0])} examples by {cfg.experiment.measure} over {len(rankings)} runs")


def _train_and_ranking(args, out):
    train = datasets.load_delimited(_input(args.train or out / "train.csv"))
    ranking = profiler.read_ranking(_input(args.ranking or out / "ranking.csv"))
    return train, ranking


def cmd_split(args, cfg, out):
    train, ranking = _train_and_ranking(args, out)
    files = _outputs(args, out / "high.csv", out / "low.csv")
    high, low = datasets.class_balanced_halves(train, ranking)
    datasets.save_delimited(high, files[0])
    datasets.save_delimited(low, files[1])
    print(f"high half {len(high)} / low half {len(low)} examples")


def cmd_prune(args, cfg, out):
    train, ranking = _train_and_ranking(args, out)
    files = _outputs(args, out / "manifest.txt", out / "pruned.csv")
    removed = datasets.removal_ids(train, ranking, args.fraction, args.mode, cfg.train.seed,
                                   cfg.experiment.classwise_removal)
    datasets.write_manifest(files[0], removed, args.mode, args.fraction, cfg.train.seed, len(train))
    datasets.save_delimited(train.without(removed), files[1])
    print(f"removed {len(removed)} of {len(train)} examples ({args.mode})")


def cmd_curve(args, cfg, out):
    from .suite import flat_rows, flat_table_bytes, report_bytes, run_suite
    files = _outputs(args, out / "report.json", out / "table.csv")
    report = run_suite(cfg, workers=args.workers)
    Path(files[0]).write_bytes(report_bytes(report))
    Path(files[1]).write_bytes(flat_table_bytes(flat_rows(report)))
    print(f"wrote {files[0]} and {files[1]}")


def cmd_eval_attacks(args, cfg, out):
    model = load_checkpoint(_input(args.checkpoint))[0]
    test = datasets.load_delimited(_input(args.test or out / "test.csv"))
    surrogate = load_checkpoint(_input(args.surrogate))[0] if args.surrogate else None
    (target,) = _outputs(args, out / f"eval_seed{cfg.train.seed}.json")
    table = overestimation_eval(model, test, cfg.eval.attack, cfg.eval.evaluators, cfg.train.seed,
                                surrogate)
    _write_json(target, {"checkpoint": str(args.checkpoint), "seed": cfg.train.seed,
                         "config_digest": digest(cfg.to_dict()), "accuracy": table})
    for k in sorted(table):
        print(f"{k:>18s}  {table[k]:.4f}")


def cmd_spearman(args, cfg, out):
    a, b = (profiler.read_ranking(_input(p)) for p in args.rankings)
    rho = profiler.spearman(a, b)
    doc = {"spearman": rho}
    if args.shuffles:
        ids = np.sort(a.ids)
        doc["p_value"] = stats.permutation_test(a.aligned(ids), b.aligned(ids), shuffles=args.shuffles,
                                                seed=[cfg.train.seed, 6])
    print(json.dumps(doc, sort_keys=True))


def cmd_report(args, cfg, out):
    path = Path(_input(args.report or out / "report.json"))
    report = json.loads(path.read_text())
    if "summary" not in report:
        raise UsageError(f"{path} is not a suite report")
    (target,) = _outputs(args, path.with_name("summary.txt"))
    lines = [f"config digest {report['config_digest']}"]
    lines += [f"{k}: {v}" for k, v in sorted(report["summary"].items())]
    Path(target).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "profile": cmd_profile, "rank": cmd_rank,
    "split": cmd_split, "prune": cmd_prune, "curve": cmd_curve, "eval-attacks": cmd_eval_attacks,
    "spearman": cmd_spearman, "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = _config(args)
        out = Path(args.out or cfg.output.dir)
        COMMANDS[args.command](args, cfg, out)
        return 0
    except (UsageError, ValueError) as exc:
        # configs, flags, malformed inputs and id mismatches
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
