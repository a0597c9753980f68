"""Experiment orchestration: train baseline/secure pairs, attack them, tabulate.

Output layout of one experiment directory::

    config.json    the resolved ExperimentConfig
    models/        baseline_s<seed>.json, secure_s<seed>.json
    attacks/       <variant>_s<seed>_e<extraction seed>.json
    stats/         first-layer weight histograms as CSV
    table.csv      one ResultRow per training seed
    cells.csv      one line per (training seed, extraction seed, variant)
    report.json    rows, cells and notes
"""
from __future__ import annotations

import csv
import json
import os
import re
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, load_mnist, make_random_dataset, mnist_paths
from .defense import DefenseConfig, max_pairwise_normalized_distance, mean_pairwise_sq_distance
from .extraction import AttackConfig, evaluate_against_ground_truth, run_layer1_attack
from .mlp import Architecture, MLPModel, TrainingConfig, accuracy, train
from .oracle import Oracle
from .theory import InputRange, LayerTooNarrow, model_attack_probability

SIGN_PHASE = "n/a (out of scope)"
DEFAULT_MNIST_DIR = os.environ.get("EXAWARE_MNIST_DIR", "data/mnist")

DATASET_KINDS = {"mnist": "mnist", "random": "random"}


class ModelNameError(ValueError):
    def __init__(self, name: str, position: int, expected: str):
        super().__init__(f"cannot parse model name {name!r} at position {position}: expected {expected}")
        self.position = position


@dataclass(frozen=True)
class ParsedName:
    architecture: Architecture
    dataset_kind: str
    seed_tag: Optional[str] = None


def parse_model_name(name: str) -> ParsedName:
    """Parse ``<Dataset><in>-<width>x<depth>-<out>`` with an optional ``(sK)`` suffix.

    ``_`` is accepted in place of ``-``.
    """
    pos = 0

    def take(pattern, expected):
        nonlocal pos
        m = re.compile(pattern).match(name, pos)
        if not m:
            raise ModelNameError(name, pos, expected)
        pos = m.end()
        return m.group(0)

    ds = take(r"[A-Za-z]+", "a dataset name")
    kind = DATASET_KINDS.get(ds.lower())
    if kind is None:
        raise ModelNameError(name, 0, f"one of {sorted(DATASET_KINDS)} as dataset")
    n_in = int(take(r"\d+", "input size"))
    take(r"[-_]", "'-'")
    width = int(take(r"\d+", "hidden width"))
    take(r"x", "'x'")
    depth = int(take(r"\d+", "hidden depth"))
    take(r"[-_]", "'-'")
    n_out = int(take(r"\d+", "output size"))
    seed_tag = None
    if pos < len(name):
        seed_tag = take(r"\s*\(s\d+\)", "a seed suffix like '(s2)'").strip()[1:-1]
    if pos != len(name):
        raise ModelNameError(name, pos, "end of name")
    if min(n_in, width, depth, n_out) < 1:
        raise ModelNameError(name, 0, "positive sizes")
    return ParsedName(Architecture((n_in,) + (width,) * depth + (n_out,)), kind, seed_tag)


@dataclass
class WeightStats:
    variance: float
    hist_counts: np.ndarray
    bin_edges: np.ndarray
    mean_pairwise_sq_distance: float
    max_normalized_distance: float

    def to_dict(self) -> dict:
        return {
            "variance": self.variance,
            "mean_pairwise_sq_distance": self.mean_pairwise_sq_distance,
            "max_normalized_distance": self.max_normalized_distance,
            "histogram": {"edges": self.bin_edges.tolist(), "counts": self.hist_counts.tolist()},
        }

    def histogram_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.hist_counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def weight_stats(model: MLPModel, layer_index: int = 0, bins: int = 60,
                 hist_range: tuple[float, float] = (-1.5, 1.5)) -> WeightStats:
    if not 0 <= layer_index < len(model.weights):
        raise IndexError(f"model has no layer {layer_index}")
    W = model.weights[layer_index]
    counts, edges = np.histogram(W, bins=bins, range=hist_range)
    return WeightStats(float(np.var(W)), counts, edges, mean_pairwise_sq_distance(W),
                       max_pairwise_normalized_distance(W))


@dataclass
class DatasetSpec:
    kind: str = "random"                 # "random" | "mnist"
    n_samples: int = 1000                # random only
    seed: int = 42                       # random only
    mnist_dir: Optional[str] = None      # mnist only; None -> DEFAULT_MNIST_DIR
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    target: str = "scalar"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    name: str
    output_dir: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    training_seeds: list = field(default_factory=lambda: [42, 10])
    extraction_seeds: list = field(default_factory=lambda: [0, 10, 20, 30])
    training: TrainingConfig = field(default_factory=TrainingConfig)
    defense: DefenseConfig = field(default_factory=lambda: DefenseConfig(lambda_similarity=1e-2))
    attack: Optional[AttackConfig] = field(default_factory=AttackConfig)
    probability_range: tuple = (0.0, 1.0)
    architecture: Optional[tuple] = None

    def __post_init__(self):
        parsed = parse_model_name(self.name)
        if self.architecture is None:
            self.architecture = parsed.architecture.layer_sizes
        self.architecture = tuple(int(v) for v in self.architecture)
        if self.architecture != parsed.architecture.layer_sizes:
            raise ValueError(f"architecture {self.architecture} disagrees with name {self.name!r}")
        if parsed.dataset_kind != self.dataset.kind:
            raise ValueError(f"name {self.name!r} implies {parsed.dataset_kind} data, config says {self.dataset.kind}")
        if not self.training_seeds:
            raise ValueError("training_seeds must be nonempty")
        if self.attack is not None and not self.extraction_seeds:
            raise ValueError("extraction_seeds must be nonempty when attacking")
        if len(set(self.training_seeds)) != len(self.training_seeds) or \
                len(set(self.extraction_seeds)) != len(self.extraction_seeds):
            raise ValueError("seed lists must not repeat")

    def to_dict(self) -> dict:
        train_d = self.training.to_dict()
        train_d.pop("defense", None)
        train_d.pop("seed", None)
        return {
            "name": self.name,
            "architecture": list(self.architecture),
            "output_dir": self.output_dir,
            "dataset": self.dataset.to_dict(),
            "training_seeds": list(self.training_seeds),
            "extraction_seeds": list(self.extraction_seeds),
            "training": train_d,
            "defense": self.defense.to_dict(),
            "attack": None if self.attack is None else self.attack.to_dict(),
            "probability_range": list(self.probability_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["dataset"] = DatasetSpec(**d.get("dataset", {}))
        d["training"] = TrainingConfig.from_dict(d.get("training", {}))
        if "defense" in d:
            d["defense"] = DefenseConfig.from_dict(d["defense"])
        if "attack" in d and d["attack"] is not None:
            d["attack"] = AttackConfig.from_dict(d["attack"])
        if "probability_range" in d:
            d["probability_range"] = tuple(d["probability_range"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class DatasetMissing(FileNotFoundError):
    pass


def load_datasets(spec: DatasetSpec, input_dim: int) -> tuple[Dataset, Optional[Dataset]]:
    """Training set and, when the data has labels, a held-out test set."""
    if spec.kind == "random":
        return make_random_dataset(spec.n_samples, input_dim, spec.seed), None
    if spec.kind == "mnist":
        d = spec.mnist_dir or DEFAULT_MNIST_DIR
        paths = [*mnist_paths(d, "train"), *mnist_paths(d, "test")]
        missing = [str(p) for p in paths if not Path(p).is_file()]
        if missing:
            raise DatasetMissing(f"dataset missing: {', '.join(missing)}")
        tr = load_mnist(*paths[:2], limit=spec.train_limit, target=spec.target)
        te = load_mnist(*paths[2:], limit=spec.test_limit, target=spec.target)
        return tr, te
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def _mean_var(values) -> tuple[Optional[float], Optional[float]]:
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.var(v))


@dataclass
class AttackCell:
    training_seed: int
    extraction_seed: int
    variant: str
    verdict: Optional[str] = None
    clusters_found: Optional[int] = None
    queries: Optional[int] = None
    signature_seconds: Optional[float] = None
    max_signature_error: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultRow:
    model_id: str
    training_seed: int
    lambda_similarity: float
    baseline_accuracy: Optional[float] = None
    secure_accuracy: Optional[float] = None
    accuracy_change_pct: Optional[float] = None   # 100 * (secure - baseline)
    verdicts: dict = field(default_factory=dict)  # variant -> {extraction seed: verdict}
    queries_mean: dict = field(default_factory=dict)
    queries_var: dict = field(default_factory=dict)
    signature_seconds_mean: dict = field(default_factory=dict)
    signature_seconds_var: dict = field(default_factory=dict)
    sign_seconds: str = SIGN_PHASE
    worst_case_probability: dict = field(default_factory=dict)
    weight_variance: dict = field(default_factory=dict)
    max_normalized_distance: dict = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_fields(self) -> dict:
        def fmt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else v

        out = {"model_id": self.model_id, "training_seed": self.training_seed,
               "lambda_similarity": repr(self.lambda_similarity),
               "baseline_accuracy": fmt(self.baseline_accuracy),
               "secure_accuracy": fmt(self.secure_accuracy),
               "accuracy_change_pct": fmt(self.accuracy_change_pct)}
        for v in ("baseline", "secure"):
            verdicts = self.verdicts.get(v, {})
            out[f"{v}_verdicts"] = ";".join(f"{k}:{verdicts[k]}" for k in verdicts)
            out[f"{v}_queries_mean"] = fmt(self.queries_mean.get(v))
            out[f"{v}_queries_var"] = fmt(self.queries_var.get(v))
            out[f"{v}_signature_seconds_mean"] = fmt(self.signature_seconds_mean.get(v))
            out[f"{v}_signature_seconds_var"] = fmt(self.signature_seconds_var.get(v))
            out[f"{v}_worst_case_probability"] = fmt(self.worst_case_probability.get(v))
            out[f"{v}_weight_variance"] = fmt(self.weight_variance.get(v))
        out["sign_seconds"] = self.sign_seconds
        out["error"] = self.error or ""
        return out


TIMING_NOTE = ("signature_seconds covers critical-point search plus signature recovery; "
               "sign recovery is not implemented, so sign timings are reported as "
               f"'{SIGN_PHASE}'. Timings are informational, verdicts depend on query budgets.")


def _attack_model(model: MLPModel, attack: AttackConfig, seed: int) -> tuple[dict, AttackCell]:
    cfg = replace(attack, seed=seed)
    oracle = Oracle.from_model(model, cfg.budget)
    rep = run_layer1_attack(oracle, model.architecture.hidden_sizes[0], cfg)
    evaluate_against_ground_truth(rep, model)
    cell = AttackCell(0, seed, "", rep.verdict, rep.clusters_found, rep.stats.queries_used,
                      rep.signature_seconds, rep.match["max_error"] if rep.match else None)
    return rep.to_dict(), cell


def run_training_seed(config: ExperimentConfig, seed: int, datasets, out: Path) -> tuple[ResultRow, list]:
    """Train both variants for one seed, then attack and score them."""
    arch = Architecture(config.architecture)
    lam = config.defense.lambda_similarity
    row = ResultRow(f"{config.name}[seed={seed}]", seed, lam)
    cells = []
    train_set, test_set = datasets
    prange = InputRange(*config.probability_range)
    models = {}
    for variant, defense in (("baseline", replace(config.defense, lambda_similarity=0.0)),
                             ("secure", config.defense)):
        tcfg = replace(config.training, seed=seed, defense=defense)
        model = train(arch, train_set, tcfg)
        model.save(out / "models" / f"{variant}_s{seed}.json")
        models[variant] = model
        ws = weight_stats(model, 0)
        ws.histogram_csv(out / "stats" / f"hist_{variant}_s{seed}.csv")
        row.weight_variance[variant] = ws.variance
        row.max_normalized_distance[variant] = ws.max_normalized_distance
        try:
            row.worst_case_probability[variant] = model_attack_probability(
                model, 0, prange).worst_case_probability
        except LayerTooNarrow:
            row.worst_case_probability[variant] = None
        if test_set is not None:
            setattr(row, f"{variant}_accuracy", accuracy(model, test_set))
    if row.baseline_accuracy is not None:
        row.accuracy_change_pct = 100.0 * (row.secure_accuracy - row.baseline_accuracy)

    if config.attack is not None:
        for variant, model in models.items():
            verdicts = {}
            for es in config.extraction_seeds:
                try:
                    rep, cell = _attack_model(model, config.attack, es)
                    with open(out / "attacks" / f"{variant}_s{seed}_e{es}.json", "w") as fh:
                        json.dump(rep, fh, indent=1)
                except Exception as exc:  # recorded per cell
                    cell = AttackCell(0, es, "", error=f"{type(exc).__name__}: {exc}")
                cell.training_seed, cell.variant = seed, variant
                cells.append(cell)
                verdicts[es] = cell.verdict if cell.error is None else "error"
            row.verdicts[variant] = verdicts
            ok = [c for c in cells if c.variant == variant and c.error is None]
            row.queries_mean[variant], row.queries_var[variant] = _mean_var([c.queries for c in ok])
            row.signature_seconds_mean[variant], row.signature_seconds_var[variant] = \
                _mean_var([c.signature_seconds for c in ok])
    return row, cells


def run_experiment(config: ExperimentConfig, workers: int = 1) -> dict:
    """Run every training seed; failures are recorded on the affected row.

    ``workers > 1`` runs training seeds in separate processes; every random
    stream is derived from the seeds, so the table is the same either way.
    """
    out = Path(config.output_dir)
    for sub in ("models", "attacks", "stats"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)

    t0 = time.perf_counter()
    rows: list[ResultRow] = []
    cells: list[AttackCell] = []
    try:
        datasets = load_datasets(config.dataset, config.architecture[0])
    except (DatasetMissing, ValueError) as exc:
        datasets = None
        msg = str(exc) if isinstance(exc, DatasetMissing) else f"dataset error: {exc}"
        for s in config.training_seeds:
            rows.append(ResultRow(f"{config.name}[seed={s}]", s,
                                  config.defense.lambda_similarity, error=msg))
    if datasets is not None:
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(workers) as pool:
                futures = [pool.submit(run_training_seed, config, s, datasets, out)
                           for s in config.training_seeds]
                results = []
                for s, f in zip(config.training_seeds, futures):
                    try:
                        results.append(f.result())
                    except Exception as exc:
                        results.append((ResultRow(f"{config.name}[seed={s}]", s,
                                                  config.defense.lambda_similarity,
                                                  error=f"{type(exc).__name__}: {exc}"), []))
        else:
            results = []
            for s in config.training_seeds:
                try:
                    results.append(run_training_seed(config, s, datasets, out))
                except Exception as exc:
                    results.append((ResultRow(f"{config.name}[seed={s}]", s,
                                              config.defense.lambda_similarity,
                                              error=f"{type(exc).__name__}: {exc}"), []))
        for row, c in results:
            rows.append(row)
            cells.extend(c)

    write_table(rows, out / "table.csv")
    write_cells(cells, out / "cells.csv")
    report = {
        "config": config.to_dict(),
        "rows": [r.to_dict() for r in rows],
        "cells": [c.to_dict() for c in cells],
        "notes": {"timing": TIMING_NOTE,
                  "accuracy_change": "100 * (secure accuracy - baseline accuracy), percentage points"},
        "wall_seconds": time.perf_counter() - t0,
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
    return report


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_table(rows: list[ResultRow], path) -> None:
    fields = list(ResultRow("", 0, 0.0).csv_fields())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, quoting=csv.QUOTE_MINIMAL)
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_fields())


def write_cells(cells: list[AttackCell], path) -> None:
    fields = list(AttackCell(0, 0, "").to_dict())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for c in cells:
            w.writerow({k: ("" if v is None else v) for k, v in c.to_dict().items()})


def format_report(report: dict) -> str:
    """Plain-text table of an experiment report."""
    lines = [f"experiment {report['config']['name']}  (lambda={report['config']['defense']['lambda_similarity']})"]
    for r in report["rows"]:
        if r.get("error"):
            lines.append(f"  seed {r['training_seed']}: ERROR {r['error']}")
            continue
        acc = ""
        if r["baseline_accuracy"] is not None:
            acc = (f" acc {r['baseline_accuracy']:.4f} -> {r['secure_accuracy']:.4f}"
                   f" ({r['accuracy_change_pct']:+.2f} pts)")
        lines.append(f"  seed {r['training_seed']}:{acc}")
        for v in ("baseline", "secure"):
            parts = [f"var {r['weight_variance'][v]:.4g}"]
            p = r["worst_case_probability"].get(v)
            if p is not None:
                parts.append(f"P_worst {p:.4g}")
            if v in r["verdicts"]:
                parts.append("attacks " + " ".join(f"{k}:{x}" for k, x in r["verdicts"][v].items()))
                q = r["queries_mean"].get(v)
                if q is not None:
                    parts.append(f"queries {q:.0f}±{np.sqrt(r['queries_var'][v]):.0f}")
                    parts.append(f"sig {r['signature_seconds_mean'][v]:.2f}s")
            parts.append(f"sign {r['sign_seconds']}")
            lines.append(f"    {v:8s} " + ", ".join(parts))
    return "\n".join(lines)
