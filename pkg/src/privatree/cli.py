"""Command-line front end.

Commands: train, predict, evaluate, budget, guarantee, backdoor, sweep.
Options can come from a JSON config file (--config); explicit flags win.
PRIVATREE_SEED serves as the default seed when neither a flag nor the config
provides one. Exit codes: 0 success, 1 I/O failure, 2 validation failure.
Reports are machine-first (JSON to stdout, CSV via --out); plotting is left
to external tools.
"""

from __future__ import annotations

import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .budget import TrainerParams, allocate_budget, required_leaf_budget
from .mechanisms import RandomStream
from .preprocess import Dataset, LoadError, load_dataset, load_schema
from .robustness import (PoisonGuaranteeQuery, RobustnessReport, TriggerSpec,
                         accuracy_lower_bound, asr_upper_bound,
                         run_poisoning_campaign)
from .tree import (ModelFormatError, deserialize, fit, fit_random_baseline,
                   predict_batch, serialize, trainer_params_for)

__all__ = ["main", "stratified_fold_indices", "cross_validated_accuracy"]


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _execute(action) -> None:
    """Map exceptions onto the exit-code contract."""
    try:
        action()
    except (LoadError, ModelFormatError, ValueError) as exc:
        _fail(2, str(exc))
    except OSError as exc:
        _fail(1, str(exc))


def _merged(config_path, cli_options: dict) -> dict:
    """Overlay precedence: explicit flag > config file > None."""
    merged = dict(cli_options)
    if config_path is not None:
        if not Path(config_path).is_file():
            raise ValueError(f"config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {config_path}: invalid JSON ({exc})")
        if not isinstance(config, dict):
            raise ValueError(f"config file {config_path}: expected a JSON object")
        unknown = set(config) - set(cli_options)
        if unknown:
            raise ValueError(f"config file {config_path}: unknown keys {sorted(unknown)}")
        for key, value in config.items():
            if merged[key] is None or merged[key] is False:
                merged[key] = value
    return merged


def _require(options: dict, *names: str) -> None:
    for name in names:
        if options.get(name) is None:
            raise ValueError(f"missing required option: --{name.replace('_', '-')}")


def _require_file(path, what: str) -> str:
    if path is None:
        raise ValueError(f"missing required option: --{what}")
    if not Path(path).is_file():
        raise ValueError(f"{what} file not found: {path}")
    return str(path)


def _seed_from(options: dict) -> int:
    seed = options.get("seed")
    if seed is None:
        seed = os.environ.get("PRIVATREE_SEED", 0)
    try:
        return int(seed)
    except (TypeError, ValueError):
        raise ValueError(f"seed must be an integer, got {seed!r}")


def _parse_grid(text, kind: str, caster):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [p for p in str(text).split(",") if p.strip()]
    if not items:
        raise ValueError(f"--{kind} must list at least one value")
    try:
        return [caster(p) for p in items]
    except (TypeError, ValueError):
        raise ValueError(f"--{kind} has non-{caster.__name__} entries: {text!r}")


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def stratified_fold_indices(labels: np.ndarray, n_folds: int,
                            rng: RandomStream) -> list[np.ndarray]:
    """Seeded stratified folds: shuffle within each class, deal round-robin."""
    labels = np.asarray(labels)
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    if n_folds > labels.size:
        raise ValueError(f"{n_folds} folds but only {labels.size} rows")
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for cls in np.unique(labels):
        cls_idx = np.flatnonzero(labels == cls)
        shuffled = cls_idx[rng.permutation(cls_idx.size)]
        for i, row in enumerate(shuffled):
            folds[i % n_folds].append(int(row))
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def _cv_trial(dataset: Dataset, epsilon: float, depth: int, max_leaf_error: float,
              n_folds: int, seed: int, trial: int, baseline: bool) -> list[float]:
    base = RandomStream(seed)
    folds = stratified_fold_indices(dataset.labels, n_folds, base.substream(10, trial))
    trainer = fit_random_baseline if baseline else fit
    scores = []
    for f, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(dataset.n), test_idx)
        train, test = dataset.subset(train_idx), dataset.subset(test_idx)
        params = trainer_params_for(train, epsilon, depth, max_leaf_error)
        fit_seed = int(base.substream(11, trial, f).integers(0, 2**63))
        model = trainer(train, params, fit_seed)
        scores.append(float(np.mean(predict_batch(model, test.rows) == test.labels)))
    return scores


def _cv_trial_star(args):
    return _cv_trial(*args)


def cross_validated_accuracy(dataset: Dataset, epsilon: float, depth: int,
                             max_leaf_error: float = 0.01, n_folds: int = 5,
                             n_trials: int = 1, seed: int = 0,
                             baseline: bool = False,
                             n_workers: int = 1) -> tuple[float, float, list[float]]:
    """Stratified k-fold accuracy repeated over n_trials fold seeds.

    Returns (mean, stderr, per-fold scores ordered by (trial, fold)). Workers
    only change scheduling, not results.
    """
    args = [(dataset, epsilon, depth, max_leaf_error, n_folds, seed, t, baseline)
            for t in range(n_trials)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            per_trial = list(pool.map(_cv_trial_star, args))
    else:
        per_trial = [_cv_trial(*a) for a in args]
    scores = [s for trial in per_trial for s in trial]
    arr = np.asarray(scores)
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), stderr, scores


def _load_inputs(options: dict) -> Dataset:
    data_path = _require_file(options.get("data"), "data")
    schema_path = _require_file(options.get("schema"), "schema")
    return load_dataset(data_path, schema_path,
                        label_column=options.get("label_column") or "label")


def _load_trigger(path, schema) -> TriggerSpec:
    path = _require_file(path, "trigger")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"trigger file {path}: invalid JSON ({exc})")
    for key in ("assignments", "source_class", "target_class"):
        if key not in raw:
            raise ValueError(f"trigger file {path}: missing {key!r}")
    name_to_idx = {f.name: j for j, f in enumerate(schema.features)}
    assignments = {}
    for name, value in raw["assignments"].items():
        if name not in name_to_idx:
            raise ValueError(f"trigger file {path}: unknown feature {name!r}")
        j = name_to_idx[name]
        spec = schema.features[j]
        if spec.kind == "categorical":
            if not isinstance(value, str) or value not in spec.categories:
                raise ValueError(f"trigger file {path}: {value!r} is not a category "
                                 f"of feature {name!r}")
            assignments[j] = float(spec.categories.index(value))
        else:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValueError(f"trigger file {path}: feature {name!r} needs a number")
            assignments[j] = float(value)
    classes = list(schema.class_labels)
    for key in ("source_class", "target_class"):
        if raw[key] not in classes:
            raise ValueError(f"trigger file {path}: {raw[key]!r} is not a class label")
    return TriggerSpec(assignments, classes.index(raw["source_class"]),
                       classes.index(raw["target_class"]))


def _x_grid_from(options: dict, n_train: int) -> list[int]:
    x_grid = _parse_grid(options.get("x_grid"), "x-grid", int)
    percent_grid = _parse_grid(options.get("percent_grid"), "percent-grid", float)
    if (x_grid is None) == (percent_grid is None):
        raise ValueError("provide exactly one of --x-grid or --percent-grid")
    if x_grid is not None:
        return x_grid
    # Percentages convert against the training-split size, not the full
    # dataset, and the resulting integer x is what gets reported.
    return [int(round(p / 100.0 * n_train)) for p in percent_grid]


def _write_report(report: RobustnessReport, out) -> None:
    _echo_json(report.to_dict())
    if out:
        base = Path(out)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
        base.with_suffix(".csv").write_text(report.to_csv_text(), encoding="utf-8")


@click.group()
def main() -> None:
    """Differentially-private decision trees with poisoning-robustness audits."""


_shared = [
    click.option("--config", default=None, help="JSON config file; explicit flags win."),
    click.option("--seed", default=None, help="RNG seed (fallback: PRIVATREE_SEED, then 0)."),
]


def _with_shared(fn):
    for deco in reversed(_shared):
        fn = deco(fn)
    return fn


@main.command()
@_with_shared
@click.option("--data", default=None, help="Training CSV.")
@click.option("--schema", default=None, help="Schema JSON.")
@click.option("--label-column", default=None, help="Label column name (default 'label').")
@click.option("--epsilon", default=None, type=float, help="Total privacy budget ('inf' allowed).")
@click.option("--depth", default=None, type=int, help="Maximum tree depth.")
@click.option("--max-leaf-error", default=None, type=float, help="Leaf error cap (default 0.01).")
@click.option("--baseline", is_flag=True, default=False, help="Train the random-split baseline.")
@click.option("--force-full-depth", is_flag=True, default=False,
              help="Disable raw-data stopping checks; always recurse to full depth.")
@click.option("--out", default=None, help="Where to write the model JSON.")
def train(config, **options) -> None:
    """Fit a tree; write the model file and print the budget ledger JSON."""
    def run() -> None:
        opts = _merged(config, options)
        _require(opts, "epsilon", "depth", "out")
        dataset = _load_inputs(opts)
        seed = _seed_from(opts)
        params = trainer_params_for(dataset, float(opts["epsilon"]), int(opts["depth"]),
                                    float(opts["max_leaf_error"] or 0.01))
        if opts["baseline"]:
            model = fit_random_baseline(dataset, params, seed)
        else:
            model = fit(dataset, params, seed,
                        force_full_depth=bool(opts["force_full_depth"]))
        out_path = Path(opts["out"])
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(serialize(model))
        _echo_json({"model_path": str(out_path), "ledger": model.ledger.to_dict(),
                    "rows_dropped": dataset.n_dropped, "cells_clipped": dataset.n_clipped})
    _execute(run)


@main.command()
@_with_shared
@click.option("--model", default=None, help="Model JSON file.")
@click.option("--data", default=None, help="CSV to predict (label column is ignored).")
@click.option("--schema", default=None, help="Schema JSON.")
@click.option("--label-column", default=None)
@click.option("--out", default=None, help="Optional CSV output path.")
def predict(config, **options) -> None:
    """Predict class labels for every row of a CSV."""
    def run() -> None:
        opts = _merged(config, options)
        model_path = _require_file(opts.get("model"), "model")
        dataset = _load_inputs(opts)
        model = deserialize(Path(model_path).read_bytes())
        if model.schema_hash != dataset.schema.hash_hex():
            raise ValueError("model was trained against a different schema")
        predictions = predict_batch(model, dataset.rows)
        names = [dataset.schema.class_labels[p] for p in predictions]
        _echo_json({"predictions": names, "n": len(names)})
        if opts.get("out"):
            Path(opts["out"]).write_text("prediction\n" + "\n".join(names) + "\n",
                                         encoding="utf-8")
    _execute(run)


@main.command()
@_with_shared
@click.option("--model", default=None, help="Evaluate a saved model (hold-out mode).")
@click.option("--data", default=None)
@click.option("--schema", default=None)
@click.option("--label-column", default=None)
@click.option("--epsilon", default=None, type=float, help="Enable k-fold mode: train per fold.")
@click.option("--depth", default=None, type=int)
@click.option("--max-leaf-error", default=None, type=float)
@click.option("--folds", default=None, type=int, help="k for k-fold mode (default 5).")
@click.option("--trials", default=None, type=int, help="Fold-seed repetitions (default 1).")
@click.option("--baseline", is_flag=True, default=False)
@click.option("--workers", default=None, type=int)
def evaluate(config, **options) -> None:
    """Accuracy of a saved model, or stratified k-fold CV of fresh fits."""
    def run() -> None:
        opts = _merged(config, options)
        dataset = _load_inputs(opts)
        if (opts.get("model") is None) == (opts.get("epsilon") is None):
            raise ValueError("provide exactly one of --model (hold-out) or "
                             "--epsilon (k-fold mode)")
        if opts.get("model") is not None:
            model = deserialize(Path(_require_file(opts["model"], "model")).read_bytes())
            if model.schema_hash != dataset.schema.hash_hex():
                raise ValueError("model was trained against a different schema")
            accuracy = float(np.mean(predict_batch(model, dataset.rows) == dataset.labels))
            _echo_json({"accuracy": accuracy, "n": dataset.n})
            return
        _require(opts, "depth")
        mean, stderr, scores = cross_validated_accuracy(
            dataset, float(opts["epsilon"]), int(opts["depth"]),
            float(opts["max_leaf_error"] or 0.01), int(opts["folds"] or 5),
            int(opts["trials"] or 1), _seed_from(opts), bool(opts["baseline"]),
            int(opts["workers"] or 1))
        _echo_json({"mean_accuracy": mean, "stderr": stderr,
                    "folds": int(opts["folds"] or 5), "trials": int(opts["trials"] or 1),
                    "scores": scores})
    _execute(run)


@main.command()
@_with_shared
@click.option("--epsilon", default=None, type=float)
@click.option("--depth", default=None, type=int)
@click.option("--n-samples", default=None, type=int)
@click.option("--n-classes", default=None, type=int)
@click.option("--max-leaf-error", default=None, type=float)
def budget(config, **options) -> None:
    """Inspect the budget allocation for a parameter set."""
    def run() -> None:
        opts = _merged(config, options)
        _require(opts, "epsilon", "depth", "n_samples", "n_classes")
        params = TrainerParams(float(opts["epsilon"]), int(opts["depth"]),
                               int(opts["n_samples"]), int(opts["n_classes"]),
                               float(opts["max_leaf_error"] or 0.01))
        plan = allocate_budget(params)
        _echo_json({"eps_leaf": plan.eps_leaf, "eps_node_num": plan.eps_node_num,
                    "eps_node_cat": plan.eps_node_cat, "eps_quantiles": plan.eps_quantiles,
                    "p_star": plan.p_star,
                    "required_leaf_budget": required_leaf_budget(params)})
    _execute(run)


@main.command()
@_with_shared
@click.option("--metric", default=None, type=click.Choice(["accuracy", "asr"]),
              help="Which guarantee to compute (default accuracy).")
@click.option("--clean-metric", default=None, type=float,
              help="Expected clean accuracy or clean ASR.")
@click.option("--epsilon", default=None, type=float)
@click.option("--x-grid", default=None, help="Comma-separated poison counts.")
@click.option("--percent-grid", default=None,
              help="Comma-separated poison percentages of the train split.")
@click.option("--n-rows", default=None, type=int,
              help="Dataset size for percent conversion (or use --data/--schema).")
@click.option("--data", default=None)
@click.option("--schema", default=None)
@click.option("--label-column", default=None)
@click.option("--folds", default=None, type=int,
              help="Folds defining the train split for percent conversion (default 5).")
@click.option("--out", default=None, help="Report base path (.json/.csv).")
def guarantee(config, **options) -> None:
    """Compute guarantee bounds only (no training, no attack)."""
    def run() -> None:
        opts = _merged(config, options)
        _require(opts, "clean_metric", "epsilon")
        metric = opts.get("metric") or "accuracy"
        if opts.get("n_rows") is not None:
            n_rows = int(opts["n_rows"])
        elif opts.get("data") is not None:
            n_rows = _load_inputs(opts).n
        else:
            n_rows = None
        folds = int(opts["folds"] or 5)
        if opts.get("percent_grid") is not None:
            if n_rows is None:
                raise ValueError("--percent-grid needs --n-rows or --data/--schema")
            n_train = int(round(n_rows * (folds - 1) / folds)) if folds > 1 else n_rows
        else:
            n_train = 0  # unused with an explicit x-grid
        x_grid = _x_grid_from(opts, n_train)
        clean = float(opts["clean_metric"])
        epsilon = float(opts["epsilon"])
        bound_of = accuracy_lower_bound if metric == "accuracy" else asr_upper_bound
        curve = [(x, bound_of(PoisonGuaranteeQuery(epsilon, x, clean)))
                 for x in sorted(set(x_grid))]
        report = RobustnessReport(metric=metric, clean_metric_mean=clean,
                                  clean_metric_stderr=0.0, guarantee_curve=curve,
                                  empirical_curve=None, n_trials=0)
        _write_report(report, opts.get("out"))
    _execute(run)


@main.command()
@_with_shared
@click.option("--data", default=None)
@click.option("--schema", default=None)
@click.option("--label-column", default=None)
@click.option("--epsilon", default=None, type=float)
@click.option("--depth", default=None, type=int)
@click.option("--max-leaf-error", default=None, type=float)
@click.option("--trigger", default=None, help="Trigger spec JSON file.")
@click.option("--x-grid", default=None)
@click.option("--percent-grid", default=None)
@click.option("--trials", default=None, type=int, help="Trials per x (default 10).")
@click.option("--test-fraction", default=None, type=float, help="Default 0.2.")
@click.option("--force-full-depth", is_flag=True, default=False,
              help="Use the proof-clean trainer variant inside the campaign.")
@click.option("--workers", default=None, type=int)
@click.option("--out", default=None, help="Report base path (.json/.csv).")
def backdoor(config, **options) -> None:
    """Run a backdoor poisoning campaign and report measured ASR vs bound."""
    def run() -> None:
        opts = _merged(config, options)
        _require(opts, "epsilon", "depth")
        dataset = _load_inputs(opts)
        trigger = _load_trigger(opts.get("trigger"), dataset.schema)
        test_fraction = float(opts["test_fraction"] or 0.2)
        n_test = max(1, int(round(dataset.n * test_fraction)))
        x_grid = _x_grid_from(opts, dataset.n - n_test)
        params = trainer_params_for(dataset, float(opts["epsilon"]), int(opts["depth"]),
                                    float(opts["max_leaf_error"] or 0.01))
        report = run_poisoning_campaign(dataset, params, trigger, x_grid,
                                        int(opts["trials"] or 10), _seed_from(opts),
                                        test_fraction=test_fraction,
                                        n_workers=int(opts["workers"] or 1),
                                        force_full_depth=bool(opts["force_full_depth"]))
        _write_report(report, opts.get("out"))
    _execute(run)


@main.command()
@_with_shared
@click.option("--data", default=None)
@click.option("--schema", default=None)
@click.option("--label-column", default=None)
@click.option("--epsilon-grid", default=None, help="Comma-separated budgets ('inf' allowed).")
@click.option("--depth", default=None, type=int)
@click.option("--max-leaf-error", default=None, type=float)
@click.option("--folds", default=None, type=int)
@click.option("--trials", default=None, type=int, help="Fold-seed repetitions per budget.")
@click.option("--baseline", is_flag=True, default=False,
              help="Add the random-split trainer as a second series.")
@click.option("--workers", default=None, type=int)
@click.option("--out", default=None, help="Optional CSV output path.")
def sweep(config, **options) -> None:
    """Mean k-fold accuracy over a budget grid, as CSV (series, epsilon, ...)."""
    def run() -> None:
        opts = _merged(config, options)
        _require(opts, "epsilon_grid", "depth")
        dataset = _load_inputs(opts)
        grid = _parse_grid(opts["epsilon_grid"], "epsilon-grid", float)
        series = [("privatree", False)] + ([("random_baseline", True)]
                                           if opts["baseline"] else [])
        lines = ["series,epsilon,mean_accuracy,stderr"]
        for name, use_baseline in series:
            for epsilon in grid:
                mean, stderr, _ = cross_validated_accuracy(
                    dataset, float(epsilon), int(opts["depth"]),
                    float(opts["max_leaf_error"] or 0.01), int(opts["folds"] or 5),
                    int(opts["trials"] or 1), _seed_from(opts), use_baseline,
                    int(opts["workers"] or 1))
                lines.append(f"{name},{epsilon!r},{mean!r},{stderr!r}")
        text = "\n".join(lines) + "\n"
        click.echo(text, nl=False)
        if opts.get("out"):
            Path(opts["out"]).write_text(text, encoding="utf-8")
    _execute(run)


if __name__ == "__main__":  # pragma: no cover
    main()
