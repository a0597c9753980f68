"""Command line entry point: ``exaware <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import Dataset
from .defense import DefenseConfig
from .extraction import AttackConfig, evaluate_against_ground_truth, run_layer1_attack
from .harness import (DatasetMissing, DatasetSpec, ExperimentConfig, format_report, load_datasets,
                      parse_model_name, run_experiment, weight_stats)
from .mlp import MLPModel, TrainingConfig, accuracy, train
from .oracle import Oracle, QueryBudget
from .theory import InputRange, model_attack_probability


def _budget(args, base: QueryBudget) -> QueryBudget:
    q = args.budget_queries if args.budget_queries is not None else base.max_queries
    s = args.budget_seconds if args.budget_seconds is not None else base.max_wall_seconds
    return QueryBudget(q, s)


def _write(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_train(args) -> int:
    parsed = parse_model_name(args.name)
    tcfg = TrainingConfig()
    if args.config:
        tcfg = TrainingConfig.from_dict(json.loads(Path(args.config).read_text()))
    defense = DefenseConfig(lambda_similarity=args.lambda_similarity)
    tcfg = replace(tcfg, seed=args.seed, defense=defense,
                   epochs=args.epochs if args.epochs is not None else tcfg.epochs)
    if args.dataset:
        train_set, test_set = Dataset.load(args.dataset), None
    else:
        spec = DatasetSpec(kind=parsed.dataset_kind, mnist_dir=args.mnist_dir,
                           n_samples=args.n_samples, train_limit=args.limit)
        train_set, test_set = load_datasets(spec, parsed.architecture.input_dim)
    model = train(parsed.architecture, train_set, tcfg)
    model.save(args.out)
    msg = {"model": args.out, "final_batch_loss": model.metadata.get("final_batch_loss")}
    if test_set is not None:
        msg["test_accuracy"] = accuracy(model, test_set)
    print(json.dumps(msg))
    return 0


def cmd_attack(args) -> int:
    model = MLPModel.load(args.model)
    cfg = AttackConfig()
    if args.config:
        cfg = AttackConfig.from_dict(json.loads(Path(args.config).read_text()))
    cfg = replace(cfg, seed=args.seed if args.seed is not None else cfg.seed,
                  budget=_budget(args, cfg.budget))
    if args.box:
        cfg = replace(cfg, search_box=tuple(args.box))
    oracle = Oracle.from_model(model, cfg.budget)
    report = run_layer1_attack(oracle, model.architecture.hidden_sizes[0], cfg)
    evaluate_against_ground_truth(report, model)
    _write(json.dumps(report.to_dict(), indent=1), args.out)
    print(f"{report.verdict}: {report.clusters_found}/{report.target_neuron_count} clusters, "
          f"{report.stats.queries_used} queries", file=sys.stderr)
    return 0 if report.success else 2


def cmd_prob(args) -> int:
    model = MLPModel.load(args.model)
    rep = model_attack_probability(model, args.layer, InputRange(*args.range),
                                   general=args.general)
    _write(rep.to_csv() if args.format == "csv" else rep.to_json(), args.out)
    return 0


def cmd_stats(args) -> int:
    model = MLPModel.load(args.model)
    ws = weight_stats(model, args.layer, bins=args.bins, hist_range=tuple(args.hist_range))
    if args.histogram:
        ws.histogram_csv(args.histogram)
    _write(json.dumps(ws.to_dict(), indent=1), args.out)
    return 0


def cmd_experiment(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    if args.out:
        raw["output_dir"] = args.out
    if args.mnist_dir:
        raw.setdefault("dataset", {})["mnist_dir"] = args.mnist_dir
    cfg = ExperimentConfig.from_dict(raw)
    if cfg.attack is not None and (args.budget_queries is not None or args.budget_seconds is not None):
        cfg.attack = replace(cfg.attack, budget=_budget(args, cfg.attack.budget))
    if args.seed is not None:
        cfg.training_seeds = [args.seed]
    report = run_experiment(cfg, workers=args.workers)
    print(format_report(report))
    return 1 if any(r.get("error") for r in report["rows"]) else 0


def cmd_report(args) -> int:
    p = Path(args.path)
    if p.is_dir():
        p = p / "report.json"
    print(format_report(json.loads(p.read_text())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exaware", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def budget_flags(p):
        p.add_argument("--budget-queries", type=int, default=None)
        p.add_argument("--budget-seconds", type=float, default=None)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("name", help="model name such as MNIST784-8x2-1 or Random16-4x1-1")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainingConfig JSON")
    p.add_argument("--lambda", dest="lambda_similarity", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mnist-dir", default=None)
    p.add_argument("--dataset", help="dataset .npz cache instead of the named source")
    p.add_argument("--n-samples", type=int, default=1000, help="random data size")
    p.add_argument("--limit", type=int, default=None, help="cap on training samples")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="extract first-layer signatures from a model file")
    p.add_argument("model")
    p.add_argument("--config", help="AttackConfig JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--box", type=float, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--out")
    budget_flags(p)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("prob", help="pairwise attack-success probabilities")
    p.add_argument("model")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--range", type=float, nargs=2, default=(0.0, 1.0), metavar=("LOW", "HIGH"))
    p.add_argument("--general", action="store_true", help="exact |x| integral, any range")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_prob)

    p = sub.add_parser("stats", help="weight variance, histogram and pair distances")
    p.add_argument("model")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--bins", type=int, default=60)
    p.add_argument("--hist-range", type=float, nargs=2, default=(-1.5, 1.5))
    p.add_argument("--histogram", help="write histogram CSV here")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("experiment", help="baseline vs secure experiment from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--mnist-dir")
    p.add_argument("--seed", type=int, default=None, help="run only this training seed")
    p.add_argument("--workers", type=int, default=1)
    budget_flags(p)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", help="print an experiment report")
    p.add_argument("path", help="experiment directory or report.json")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DatasetMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
