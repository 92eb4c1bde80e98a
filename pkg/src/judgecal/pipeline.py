"""Deterministic experiment pipeline over grids of fits and evaluations.

A run is described by a JSON config naming a data source (synthetic or a
bundle directory), a list of weighting methods, an experiment grid, and
statistics settings.  Every grid cell is a pure function of the config and
the master seed: per-purpose seeds are derived by stable hashing, workers
never write files, and the main process writes artifacts in a fixed order
with repr-precision floats.  Running the same config twice, or with a
different worker count, produces byte-identical artifacts.

Artifacts in the output directory:

- ``manifest.json``: the resolved config plus an index of weight files.
- ``weights/<method>__<cell>.json``: one fitted weight matrix per method
  and grid cell.
- ``fit_reports.csv``: optimizer diagnostics for the fitted methods.
- ``eval/metrics.csv``: one row per (cell, method, metric).
- ``eval/curves.csv`` and ``eval/curves_aggregate.csv``: selective risk
  at each coverage level, per cell and averaged with bootstrap bands.
- ``eval/aggregate.csv``: per-method metric means with bootstrap bands.
- ``eval/report.json``: config echo, cell inventory, and failed cells.
- ``eval/comparison.csv``: each method against the per-metric best, with
  permutation p-values adjusted for false discovery.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import DEFAULT_TEMPERATURE, fit_spherical_kmeans
from .ensemble import (
    EnsembleWeights,
    WEIGHT_KINDS,
    build_loglik_tensor,
    fit_bpe,
    fit_mmb,
    predict,
    select_baseline,
)
from .errors import (
    ArgumentError,
    CapacityError,
    DimensionError,
    DomainError,
    FormatError,
    IntegrityError,
    JudgecalError,
    ValidationError,
)
from .ingest import DatasetBundle, load_bundle, save_bundle, split_dataset
from .metrics import (
    PredictionSet,
    calibration_errors,
    classification_scores,
    error_coverage_curve,
    mean_confidence,
    proper_scores,
    ranking_scores,
)
from .stats import PairedScores, bootstrap_mean_ci, by_fdr, paired_permutation_test
from .synth import SynthConfig, generate_benchmark, generate_no_preference_pairs

DEFAULT_N_CLUSTERS = 8

LABELED_METRICS = (
    "ece",
    "mce",
    "nll",
    "brier",
    "accuracy",
    "f1",
    "kappa",
    "roc_auc",
    "pr_auc",
    "mean_confidence",
)
HIGHER_BETTER = frozenset({"accuracy", "f1", "kappa", "roc_auc", "pr_auc"})

_METRICS_HEADER = (
    "n_prompts",
    "n_val",
    "train_seed",
    "data_seed",
    "cluster_seed",
    "method",
    "metric",
    "value",
)


def derive_seed(master: int, family: str, *parts) -> int:
    """Stable 64-bit seed for one purpose within a run.

    Hashes the master seed, a purpose label, and any distinguishing parts,
    so different purposes never share a random stream and the mapping is
    identical across processes and sessions.
    """
    key = "|".join([str(int(master)), family] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class MethodSpec:
    """One weighting method to fit: a kind plus its settings."""

    name: str
    kind: str
    k: int = DEFAULT_N_CLUSTERS
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.name or not all(c.isalnum() or c in "_-" for c in self.name):
            raise ValidationError(
                f"method name {self.name!r} must be nonempty and use only "
                f"letters, digits, '_' or '-'"
            )
        if self.kind not in WEIGHT_KINDS:
            raise ValidationError(
                f"method {self.name!r}: unknown kind {self.kind!r}, "
                f"expected one of {WEIGHT_KINDS}"
            )
        if self.kind == "mmb" and self.k < 1:
            raise ValidationError(f"method {self.name!r}: k must be positive")
        if self.kind == "mmb" and self.temperature <= 0.0:
            raise ValidationError(f"method {self.name!r}: temperature must be positive")


@dataclass(frozen=True)
class GridCell:
    """Coordinates of one experiment cell."""

    n_prompts: int
    n_val: int
    train_seed: int
    data_seed: int
    cluster_seed: int

    def tag(self) -> str:
        return (
            f"P{self.n_prompts:03d}_V{self.n_val:04d}"
            f"_t{self.train_seed}_d{self.data_seed}_c{self.cluster_seed}"
        )

    def row_prefix(self) -> tuple:
        return (
            self.n_prompts,
            self.n_val,
            self.train_seed,
            self.data_seed,
            self.cluster_seed,
        )


def _expect_int_list(obj, what: str) -> Tuple[int, ...]:
    if not isinstance(obj, (list, tuple)) or not obj:
        raise ValidationError(f"{what} must be a nonempty list of integers")
    out = []
    for v in obj:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValidationError(f"{what} must contain only integers, got {v!r}")
        out.append(v)
    return tuple(out)


def _check_keys(obj: dict, allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown {where} keys: {unknown}")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run description; see :func:`load_config`."""

    seed: int = 0
    source_mode: str = "synth"
    synth_params: dict = field(default_factory=dict)
    data_dir: Optional[str] = None
    n_support: Optional[int] = None
    methods: Tuple[MethodSpec, ...] = ()
    prompt_counts: Tuple[int, ...] = ()
    validation_sizes: Tuple[int, ...] = ()
    train_seeds: Tuple[int, ...] = (0,)
    data_seeds: Tuple[int, ...] = (0,)
    cluster_seeds: Tuple[int, ...] = (0,)
    alpha: float = 0.05
    n_permutations: int = 10_000
    n_bootstrap: int = 1000
    permutation_mode: str = "auto"
    n_bins: int = 15
    positive_class: int = 0
    coverage_points: int = 20
    no_preference: bool = False

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ValidationError("config root must be a JSON object")
        _check_keys(obj, ("seed", "source", "methods", "grid", "stats", "metrics"), "config")
        seed = obj.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ValidationError("seed must be an integer")

        source = obj.get("source", {"mode": "synth"})
        if not isinstance(source, dict):
            raise ValidationError("source must be an object")
        _check_keys(source, ("mode", "params", "data_dir", "n_support"), "source")
        mode = source.get("mode", "synth")
        if mode not in ("synth", "files"):
            raise ValidationError(f"source mode must be 'synth' or 'files', got {mode!r}")
        synth_params = source.get("params", {})
        if not isinstance(synth_params, dict):
            raise ValidationError("source params must be an object")
        if "seed" in synth_params:
            raise ValidationError(
                "source params must not set 'seed'; it is derived from the master seed"
            )
        data_dir = source.get("data_dir")
        if mode == "files" and not isinstance(data_dir, str):
            raise ValidationError("files mode needs source.data_dir")
        n_support = source.get("n_support")
        if n_support is not None and (isinstance(n_support, bool) or not isinstance(n_support, int)):
            raise ValidationError("source.n_support must be an integer")

        raw_methods = obj.get("methods", [])
        if not isinstance(raw_methods, list) or not raw_methods:
            raise ValidationError("config needs a nonempty methods list")
        methods = []
        for entry in raw_methods:
            if not isinstance(entry, dict):
                raise ValidationError("each method must be an object")
            _check_keys(entry, ("name", "kind", "k", "temperature"), "method")
            if "kind" not in entry:
                raise ValidationError("each method needs a kind")
            kwargs = {"name": entry.get("name", entry["kind"]), "kind": entry["kind"]}
            if "k" in entry:
                kwargs["k"] = entry["k"]
            if "temperature" in entry:
                kwargs["temperature"] = entry["temperature"]
            methods.append(MethodSpec(**kwargs))
        names = [m.name for m in methods]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate method names in {names}")

        grid = obj.get("grid", {})
        if not isinstance(grid, dict):
            raise ValidationError("grid must be an object")
        _check_keys(
            grid,
            ("prompt_counts", "validation_sizes", "train_seeds", "data_seeds", "cluster_seeds"),
            "grid",
        )
        if "prompt_counts" not in grid or "validation_sizes" not in grid:
            raise ValidationError("grid needs prompt_counts and validation_sizes")
        prompt_counts = _expect_int_list(grid["prompt_counts"], "grid.prompt_counts")
        validation_sizes = _expect_int_list(grid["validation_sizes"], "grid.validation_sizes")
        train_seeds = _expect_int_list(grid.get("train_seeds", [0]), "grid.train_seeds")
        data_seeds = _expect_int_list(grid.get("data_seeds", [0]), "grid.data_seeds")
        cluster_seeds = _expect_int_list(grid.get("cluster_seeds", [0]), "grid.cluster_seeds")

        stats = obj.get("stats", {})
        if not isinstance(stats, dict):
            raise ValidationError("stats must be an object")
        _check_keys(stats, ("alpha", "n_permutations", "n_bootstrap", "permutation_mode"), "stats")
        alpha = float(stats.get("alpha", 0.05))
        if not 0.0 < alpha < 1.0:
            raise DomainError("stats.alpha must be in (0, 1)")
        n_permutations = stats.get("n_permutations", 10_000)
        n_bootstrap = stats.get("n_bootstrap", 1000)
        for label, v in (("n_permutations", n_permutations), ("n_bootstrap", n_bootstrap)):
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValidationError(f"stats.{label} must be a positive integer")
        permutation_mode = stats.get("permutation_mode", "auto")
        if permutation_mode not in ("auto", "exact", "sampled"):
            raise ValidationError(
                f"stats.permutation_mode must be auto, exact, or sampled, "
                f"got {permutation_mode!r}"
            )

        metrics = obj.get("metrics", {})
        if not isinstance(metrics, dict):
            raise ValidationError("metrics must be an object")
        _check_keys(
            metrics,
            ("n_bins", "positive_class", "coverage_points", "no_preference"),
            "metrics",
        )
        n_bins = metrics.get("n_bins", 15)
        coverage_points = metrics.get("coverage_points", 20)
        positive_class = metrics.get("positive_class", 0)
        for label, v in (
            ("n_bins", n_bins),
            ("coverage_points", coverage_points),
            ("positive_class", positive_class),
        ):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ValidationError(f"metrics.{label} must be an integer")
        if n_bins < 1 or coverage_points < 1:
            raise DomainError("metrics.n_bins and metrics.coverage_points must be positive")
        no_preference = metrics.get("no_preference", False)
        if not isinstance(no_preference, bool):
            raise ValidationError("metrics.no_preference must be a boolean")

        return cls(
            seed=seed,
            source_mode=mode,
            synth_params=dict(synth_params),
            data_dir=data_dir,
            n_support=n_support,
            methods=tuple(methods),
            prompt_counts=prompt_counts,
            validation_sizes=validation_sizes,
            train_seeds=train_seeds,
            data_seeds=data_seeds,
            cluster_seeds=cluster_seeds,
            alpha=alpha,
            n_permutations=n_permutations,
            n_bootstrap=n_bootstrap,
            permutation_mode=permutation_mode,
            n_bins=n_bins,
            positive_class=positive_class,
            coverage_points=coverage_points,
            no_preference=no_preference,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        from dataclasses import replace

        return replace(self, seed=seed)

    def echo(self) -> dict:
        """The resolved config as a plain JSON-ready mapping."""
        return {
            "seed": self.seed,
            "source": {
                "mode": self.source_mode,
                "params": self.synth_params,
                "data_dir": self.data_dir,
                "n_support": self.n_support,
            },
            "methods": [
                {"name": m.name, "kind": m.kind, "k": m.k, "temperature": m.temperature}
                for m in self.methods
            ],
            "grid": {
                "prompt_counts": list(self.prompt_counts),
                "validation_sizes": list(self.validation_sizes),
                "train_seeds": list(self.train_seeds),
                "data_seeds": list(self.data_seeds),
                "cluster_seeds": list(self.cluster_seeds),
            },
            "stats": {
                "alpha": self.alpha,
                "n_permutations": self.n_permutations,
                "n_bootstrap": self.n_bootstrap,
                "permutation_mode": self.permutation_mode,
            },
            "metrics": {
                "n_bins": self.n_bins,
                "positive_class": self.positive_class,
                "coverage_points": self.coverage_points,
                "no_preference": self.no_preference,
            },
        }

    def grid_cells(self) -> List[GridCell]:
        return [
            GridCell(*combo)
            for combo in itertools.product(
                self.prompt_counts,
                self.validation_sizes,
                self.train_seeds,
                self.data_seeds,
                self.cluster_seeds,
            )
        ]

    def synth_config(self, n_val: int, seed: int) -> SynthConfig:
        params = dict(self.synth_params)
        params["n_val"] = n_val
        params["seed"] = seed
        try:
            return SynthConfig(**params)
        except TypeError as exc:
            raise ValidationError(f"bad source params: {exc}") from exc


def load_config(path, seed_override: Optional[int] = None) -> RunConfig:
    """Parse a JSON run config; optionally override the master seed."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc.msg})")
    config = RunConfig.from_dict(obj)
    if seed_override is not None:
        config = config.with_seed(seed_override)
    return config


@dataclass
class CellData:
    """Materialized data for one grid cell."""

    train: DatasetBundle
    test: DatasetBundle
    prompt_subset: tuple


def materialize_cell(config: RunConfig, cell: GridCell) -> CellData:
    """Build the cell's data deterministically from config and seeds.

    Synthetic mode regenerates the benchmark for the cell's data seed; file
    mode re-splits the stored bundle, keeping any pre-existing test split
    fixed.  When the cell asks for fewer prompts than exist, a subset is
    drawn per data seed and kept in original prompt order.
    """
    data_seed = derive_seed(config.seed, "data", cell.data_seed)
    if config.source_mode == "synth":
        synth_cfg = config.synth_config(n_val=cell.n_val, seed=data_seed)
        train, _ = generate_benchmark(synth_cfg)
        if config.no_preference:
            test = generate_no_preference_pairs(synth_cfg)
        else:
            test = train
    else:
        base = load_bundle(config.data_dir)
        if config.n_support is not None:
            n_support = config.n_support
        else:
            max_k = max((m.k for m in config.methods if m.kind == "mmb"), default=1)
            n_support = min(256 * max_k, max(len(base.embeddings) - cell.n_val, 0))
        train = split_dataset(base, seed=data_seed, n_val=cell.n_val, n_support=n_support)
        test = train

    all_prompts = train.prompt_ids
    if cell.n_prompts > len(all_prompts):
        raise CapacityError(
            f"cell asks for {cell.n_prompts} prompts but the data has "
            f"{len(all_prompts)}"
        )
    rng = np.random.default_rng(derive_seed(config.seed, "prompts", cell.data_seed))
    chosen = sorted(rng.permutation(len(all_prompts))[: cell.n_prompts].tolist())
    subset = tuple(all_prompts[i] for i in chosen)
    return CellData(train=train, test=test, prompt_subset=subset)


def fit_cell(config: RunConfig, cell: GridCell):
    """Fit every configured method on one cell's validation data."""
    data = materialize_cell(config, cell)
    tensor = build_loglik_tensor(data.train, "validation", prompt_ids=data.prompt_subset)
    weights_by_method: Dict[str, EnsembleWeights] = {}
    report_rows = []
    for method in config.methods:
        if method.kind == "bpe":
            fitted = fit_bpe(tensor)
        elif method.kind == "mmb":
            support_ids = data.train.samples("support")
            model = fit_spherical_kmeans(
                data.train.embeddings.matrix(support_ids),
                k=method.k,
                seed=derive_seed(config.seed, "cluster", cell.cluster_seed),
                temperature=method.temperature,
            )
            assignments = model.assign_many(
                data.train.embeddings.matrix(list(tensor.sample_ids))
            )
            fitted = fit_mmb(tensor, assignments, cluster_model=model)
        else:
            fitted = select_baseline(
                method.kind, tensor, seed=derive_seed(config.seed, "train", cell.train_seed)
            )
        weights_by_method[method.name] = fitted
        if fitted.report is not None:
            report_rows.append(
                cell.row_prefix()
                + (
                    method.name,
                    method.kind,
                    fitted.report.converged,
                    fitted.report.iterations,
                    fitted.report.final_objective,
                    fitted.report.closed_form_gap,
                )
            )
    return weights_by_method, report_rows


def _fit_cell_task(task):
    config, cell = task
    try:
        weights_by_method, report_rows = fit_cell(config, cell)
    except JudgecalError as exc:
        raise type(exc)(f"[cell {cell.tag()}] {exc}") from exc
    return cell, weights_by_method, report_rows


def _predict_matrix(weights: EnsembleWeights, bundle: DatasetBundle, sample_ids):
    rows = []
    need_embedding = weights.kind == "mmb"
    for sample_id in sample_ids:
        probs = bundle.choice_probs(sample_id)
        embedding = None
        if need_embedding:
            if sample_id not in bundle.embeddings:
                raise IntegrityError(f"no embedding for test sample {sample_id!r}")
            embedding = bundle.embeddings[sample_id]
        rows.append(predict(weights, probs, embedding=embedding))
    try:
        return np.stack(rows)
    except ValueError:
        raise DimensionError("test samples disagree in choice count")


def eval_cell(config: RunConfig, cell: GridCell, weights_by_method):
    """Evaluate stored weights on one cell's test split.

    Returns (metric_rows, curve_rows).  In no-preference mode the test data
    is unlabeled and the only metric is mean confidence.
    """
    data = materialize_cell(config, cell)
    test_ids = data.test.samples("test")
    if not test_ids:
        raise CapacityError("test split is empty")
    labels = None
    if not config.no_preference:
        raw = [data.test.label_of(s) for s in test_ids]
        missing = [s for s, v in zip(test_ids, raw) if v is None]
        if missing:
            raise IntegrityError(f"unlabeled test samples {missing[:5]}")
        labels = np.asarray(raw, dtype=np.int64)

    metric_rows = []
    curve_rows = []
    for method in config.methods:
        weights = weights_by_method[method.name]
        probs = _predict_matrix(weights, data.test, test_ids)
        preds = PredictionSet(probs=probs, labels=labels)
        if config.no_preference:
            values = {"mean_confidence": mean_confidence(preds)}
        else:
            ece, mce, _ = calibration_errors(preds, n_bins=config.n_bins)
            nll, brier = proper_scores(preds)
            scores = classification_scores(preds, positive_class=config.positive_class)
            roc_auc, pr_auc = ranking_scores(preds, positive_class=config.positive_class)
            values = {
                "ece": ece,
                "mce": mce,
                "nll": nll,
                "brier": brier,
                "accuracy": scores.accuracy,
                "f1": scores.f1,
                "kappa": scores.kappa,
                "roc_auc": roc_auc,
                "pr_auc": pr_auc,
                "mean_confidence": mean_confidence(preds),
            }
            coverages, errors = error_coverage_curve(preds, n_points=config.coverage_points)
            for c, e in zip(coverages, errors):
                curve_rows.append(cell.row_prefix() + (method.name, float(c), float(e)))
        for metric, value in values.items():
            metric_rows.append(cell.row_prefix() + (method.name, metric, float(value)))
    return metric_rows, curve_rows


def _eval_cell_task(task):
    config, cell, weights_by_method = task
    try:
        metric_rows, curve_rows = eval_cell(config, cell, weights_by_method)
    except Exception as exc:
        return cell, False, f"{type(exc).__name__}: {exc}"
    return cell, True, (metric_rows, curve_rows)


def _run_tasks(func, tasks, parallel: int):
    if parallel < 1:
        raise ValidationError("parallel worker count must be at least 1")
    if parallel == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(func, tasks))


def _format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_value(v) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_fit(config: RunConfig, out_dir, parallel: int = 1) -> dict:
    """Fit all methods over the grid and persist weights plus diagnostics."""
    out_dir = os.fspath(out_dir)
    cells = config.grid_cells()
    weights_dir = os.path.join(out_dir, "weights")
    os.makedirs(weights_dir, exist_ok=True)
    results = _run_tasks(_fit_cell_task, [(config, c) for c in cells], parallel)

    index = {}
    report_rows = []
    for cell, weights_by_method, rows in results:
        for method in config.methods:
            filename = f"{method.name}__{cell.tag()}.json"
            weights_by_method[method.name].save(os.path.join(weights_dir, filename))
            index[f"{method.name}__{cell.tag()}"] = os.path.join("weights", filename)
        report_rows.extend(rows)

    _write_csv(
        os.path.join(out_dir, "fit_reports.csv"),
        (
            "n_prompts",
            "n_val",
            "train_seed",
            "data_seed",
            "cluster_seed",
            "method",
            "kind",
            "converged",
            "iterations",
            "final_objective",
            "closed_form_gap",
        ),
        report_rows,
    )
    manifest = {
        "config": config.echo(),
        "cells": [c.tag() for c in cells],
        "methods": [m.name for m in config.methods],
        "weights": index,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _load_cell_weights(config: RunConfig, out_dir: str, cell: GridCell):
    weights_by_method = {}
    for method in config.methods:
        path = os.path.join(out_dir, "weights", f"{method.name}__{cell.tag()}.json")
        if not os.path.exists(path):
            raise IntegrityError(
                f"missing weights for method {method.name!r} in cell {cell.tag()}; "
                f"run fit first"
            )
        weights_by_method[method.name] = EnsembleWeights.load(path)
    return weights_by_method


def cmd_eval(config: RunConfig, out_dir, parallel: int = 1) -> dict:
    """Evaluate persisted weights over the grid and write metric tables."""
    out_dir = os.fspath(out_dir)
    cells = config.grid_cells()
    eval_dir = os.path.join(out_dir, "eval")
    os.makedirs(eval_dir, exist_ok=True)

    tasks = [(config, cell, _load_cell_weights(config, out_dir, cell)) for cell in cells]
    results = _run_tasks(_eval_cell_task, tasks, parallel)

    metric_rows = []
    curve_rows = []
    failures = []
    for cell, ok, payload in results:
        if ok:
            metric_rows.extend(payload[0])
            curve_rows.extend(payload[1])
        else:
            failures.append({"cell": cell.tag(), "error": payload})

    _write_csv(os.path.join(eval_dir, "metrics.csv"), _METRICS_HEADER, metric_rows)
    _write_csv(
        os.path.join(eval_dir, "curves.csv"),
        (
            "n_prompts",
            "n_val",
            "train_seed",
            "data_seed",
            "cluster_seed",
            "method",
            "coverage",
            "error",
        ),
        curve_rows,
    )

    aggregate_rows = _aggregate_metrics(config, metric_rows)
    _write_csv(
        os.path.join(eval_dir, "aggregate.csv"),
        ("method", "metric", "n_cells", "mean", "ci_low", "ci_high"),
        aggregate_rows,
    )
    curve_aggregate = _aggregate_curves(config, curve_rows)
    _write_csv(
        os.path.join(eval_dir, "curves_aggregate.csv"),
        ("method", "coverage", "n_cells", "mean_error", "ci_low", "ci_high"),
        curve_aggregate,
    )

    report = {
        "config": config.echo(),
        "cells": [c.tag() for c in cells],
        "methods": [m.name for m in config.methods],
        "metrics": ["mean_confidence"] if config.no_preference else list(LABELED_METRICS),
        "failed_cells": failures,
        "tables": {
            "metrics": "metrics.csv",
            "curves": "curves.csv",
            "aggregate": "aggregate.csv",
            "curves_aggregate": "curves_aggregate.csv",
        },
    }
    _write_json(os.path.join(eval_dir, "report.json"), report)
    return report


def _aggregate_metrics(config: RunConfig, metric_rows):
    by_key: Dict[tuple, list] = {}
    for row in metric_rows:
        method, metric, value = row[5], row[6], row[7]
        by_key.setdefault((method, metric), []).append(value)
    rows = []
    method_order = {m.name: i for i, m in enumerate(config.methods)}
    for (method, metric) in sorted(
        by_key, key=lambda k: (method_order.get(k[0], len(method_order)), k[0], k[1])
    ):
        values = by_key[(method, metric)]
        mean = float(np.mean(values))
        if len(values) >= 2:
            low, high = bootstrap_mean_ci(
                values,
                n_boot=config.n_bootstrap,
                seed=derive_seed(config.seed, "aggregate", method, metric),
            )
        else:
            low = high = mean
        rows.append((method, metric, len(values), mean, low, high))
    return rows


def _aggregate_curves(config: RunConfig, curve_rows):
    by_key: Dict[tuple, list] = {}
    for row in curve_rows:
        method, coverage, error = row[5], row[6], row[7]
        by_key.setdefault((method, coverage), []).append(error)
    rows = []
    method_order = {m.name: i for i, m in enumerate(config.methods)}
    for (method, coverage) in sorted(
        by_key, key=lambda k: (method_order.get(k[0], len(method_order)), k[0], k[1])
    ):
        values = by_key[(method, coverage)]
        mean = float(np.mean(values))
        if len(values) >= 2:
            low, high = bootstrap_mean_ci(
                values,
                n_boot=config.n_bootstrap,
                seed=derive_seed(config.seed, "curve", method, repr(float(coverage))),
            )
        else:
            low = high = mean
        rows.append((method, coverage, len(values), mean, low, high))
    return rows


def _read_metrics_csv(path: str):
    if not os.path.exists(path):
        raise IntegrityError(f"{path} not found; run eval first")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or tuple(lines[0].split(",")) != _METRICS_HEADER:
        raise FormatError(f"{path}: unexpected metrics header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(_METRICS_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(_METRICS_HEADER)} columns")
        try:
            rows.append(
                (
                    int(parts[0]),
                    int(parts[1]),
                    int(parts[2]),
                    int(parts[3]),
                    int(parts[4]),
                    parts[5],
                    parts[6],
                    float(parts[7]),
                )
            )
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed metric row")
    return rows


def cmd_compare(
    config: RunConfig,
    out_dir,
    alpha: Optional[float] = None,
    baseline: Optional[str] = None,
) -> list:
    """Test every method against the per-metric best (or a fixed baseline).

    For each metric, the method with the best aggregate mean is the
    reference (direction-aware; ties go to config order).  Every other
    method is compared with a paired sign-flip permutation test over grid
    cells, and p-values are adjusted per metric family with the
    Benjamini-Yekutieli step-up.  A method whose scores are identical to
    the reference keeps p = 1.0 and both are flagged best-equivalent.
    """
    out_dir = os.fspath(out_dir)
    if alpha is None:
        alpha = config.alpha
    rows = _read_metrics_csv(os.path.join(out_dir, "eval", "metrics.csv"))

    method_names = [m.name for m in config.methods]
    if baseline is not None and baseline not in method_names:
        raise ArgumentError(f"baseline {baseline!r} is not a configured method")

    by_metric: Dict[str, Dict[str, Dict[tuple, float]]] = {}
    for row in rows:
        cell_key, method, metric, value = row[:5], row[5], row[6], row[7]
        by_metric.setdefault(metric, {}).setdefault(method, {})[cell_key] = value

    comparison_rows = []
    for metric in sorted(by_metric):
        per_method = by_metric[metric]
        methods = [m for m in method_names if m in per_method]
        if not methods:
            continue
        cell_keys = sorted(per_method[methods[0]])
        for method in methods[1:]:
            if sorted(per_method[method]) != cell_keys:
                raise IntegrityError(
                    f"metric {metric!r}: methods cover different grid cells; "
                    f"the comparison needs aligned per-cell scores"
                )
        vectors = {
            m: np.array([per_method[m][k] for k in cell_keys]) for m in methods
        }
        higher = metric in HIGHER_BETTER
        if baseline is not None:
            best = baseline
        else:
            means = {m: float(vectors[m].mean()) for m in methods}
            ordered = sorted(
                methods, key=lambda m: (-means[m] if higher else means[m], methods.index(m))
            )
            best = ordered[0]

        others = [m for m in methods if m != best]
        p_values = []
        stats = []
        equivalents = []
        for method in others:
            diffs_stat = float(np.mean(vectors[method] - vectors[best]))
            scores = PairedScores(scores_a=vectors[method], scores_b=vectors[best])
            p = paired_permutation_test(
                scores,
                n_perm=config.n_permutations,
                seed=derive_seed(config.seed, "compare", metric, method),
                mode=config.permutation_mode,
            )
            p_values.append(p)
            stats.append(diffs_stat)
            equivalents.append(bool(np.all(vectors[method] == vectors[best])))
        if p_values:
            decision = by_fdr(p_values, alpha=alpha)
        else:
            decision = None
        comparison_rows.append((metric, best, best, 0.0, 1.0, 1.0, False, True))
        for i, method in enumerate(others):
            comparison_rows.append(
                (
                    metric,
                    method,
                    best,
                    stats[i],
                    float(decision.raw_p[i]),
                    float(decision.adjusted_p[i]),
                    bool(decision.rejected[i]),
                    equivalents[i],
                )
            )

    _write_csv(
        os.path.join(out_dir, "eval", "comparison.csv"),
        (
            "metric",
            "method",
            "best_method",
            "statistic",
            "raw_p",
            "adjusted_p",
            "rejected",
            "best_equivalent",
        ),
        comparison_rows,
    )
    return comparison_rows


def cmd_synth(config: RunConfig, out_dir, no_preference: bool = False) -> None:
    """Generate a synthetic benchmark directory from the config's params."""
    out_dir = os.fspath(out_dir)
    params = dict(config.synth_params)
    n_val = params.pop("n_val", SynthConfig.n_val)
    synth_cfg = config.synth_config(n_val=n_val, seed=config.seed)
    bundle, truth = generate_benchmark(synth_cfg)
    os.makedirs(out_dir, exist_ok=True)
    save_bundle(bundle, out_dir)
    truth.save(os.path.join(out_dir, "ground_truth.json"))
    if no_preference:
        npref = generate_no_preference_pairs(synth_cfg)
        npref_dir = os.path.join(out_dir, "no_preference")
        os.makedirs(npref_dir, exist_ok=True)
        save_bundle(npref, npref_dir)


def _format_table(header, rows) -> str:
    cells = [list(header)] + [[_format_value(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(val.ljust(widths[j]) for j, val in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[j] for j in range(len(header))))
    return "\n".join(lines)


def _read_csv_rows(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty table")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def cmd_report(out_dir, fmt: str = "table") -> str:
    """Render the evaluation summary from persisted artifacts only."""
    out_dir = os.fspath(out_dir)
    if fmt not in ("table", "csv"):
        raise ValidationError(f"unknown report format {fmt!r}")
    eval_dir = os.path.join(out_dir, "eval")
    report_path = os.path.join(eval_dir, "report.json")
    if not os.path.exists(report_path):
        raise IntegrityError(f"{report_path} not found; run eval first")
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)

    agg_header, agg_rows = _read_csv_rows(os.path.join(eval_dir, "aggregate.csv"))
    comparison_path = os.path.join(eval_dir, "comparison.csv")
    cmp_header, cmp_rows = (None, None)
    if os.path.exists(comparison_path):
        cmp_header, cmp_rows = _read_csv_rows(comparison_path)

    if fmt == "csv":
        sections = [",".join(agg_header)]
        sections += [",".join(r) for r in agg_rows]
        if cmp_header is not None:
            sections.append("")
            sections.append(",".join(cmp_header))
            sections += [",".join(r) for r in cmp_rows]
        return "\n".join(sections) + "\n"

    out = []
    out.append("judgecal evaluation report")
    out.append(f"seed: {report['config']['seed']}")
    out.append(f"source: {report['config']['source']['mode']}")
    out.append(f"methods: {', '.join(report['methods'])}")
    out.append(f"cells: {len(report['cells'])}")
    failed = report.get("failed_cells", [])
    if failed:
        out.append(f"failed cells ({len(failed)}):")
        for item in failed:
            out.append(f"  {item['cell']}: {item['error']}")
    else:
        out.append("failed cells: none")
    out.append("")
    out.append("aggregate metrics (mean over cells, 95% bootstrap interval)")
    out.append(_format_table(agg_header, agg_rows))
    if cmp_header is not None:
        out.append("")
        out.append("comparisons against the per-metric best")
        out.append(_format_table(cmp_header, cmp_rows))
    return "\n".join(out) + "\n"
