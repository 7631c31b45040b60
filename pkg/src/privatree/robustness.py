"""Poisoning-robustness guarantees and an empirical backdoor harness.

An epsilon-DP learner changes its output distribution by at most e^(x*eps)
under x poisoned training rows, which bounds expected accuracy from below
and expected backdoor attack success rate from above. The campaign runner
estimates the clean expectation over repeated train/test splits, attaches
the guarantee curve, and (for trigger attacks) measures the attack success
rate empirically.
"""

from __future__ import annotations

import io
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .budget import TrainerParams
from .mechanisms import RandomStream
from .preprocess import Dataset, DatasetSchema
from .tree import TreeModel, fit, predict_batch

__all__ = [
    "PoisonGuaranteeQuery",
    "TriggerSpec",
    "RobustnessReport",
    "accuracy_lower_bound",
    "asr_upper_bound",
    "attack_cost_lower_bound",
    "poison_backdoor",
    "attack_success_rate",
    "run_poisoning_campaign",
]


@dataclass(frozen=True)
class PoisonGuaranteeQuery:
    """Inputs to a guarantee bound: privacy level, poison count, clean metric."""

    epsilon: float
    x: int
    clean_metric: float

    def __post_init__(self) -> None:
        if isinstance(self.epsilon, bool) or not isinstance(self.epsilon, (int, float)):
            raise ValueError(f"epsilon must be a positive real, got {self.epsilon!r}")
        if math.isnan(self.epsilon) or self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon!r}")
        if not isinstance(self.x, int) or isinstance(self.x, bool) or self.x < 0:
            raise ValueError(f"x must be a non-negative integer, got {self.x!r}")
        if not (0.0 <= self.clean_metric <= 1.0):
            raise ValueError(f"clean_metric must lie in [0, 1], got {self.clean_metric!r}")
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "clean_metric", float(self.clean_metric))


def _decay(epsilon: float, x: int) -> float:
    # e^(-x*eps); x == 0 is exact even at infinite epsilon.
    return 1.0 if x == 0 else math.exp(-x * epsilon)


def accuracy_lower_bound(query: PoisonGuaranteeQuery) -> float:
    """Guaranteed expected accuracy after at most x poisoned rows:
    e^(-x*eps) times the clean expected accuracy, clipped to [0, 1]."""
    return min(max(_decay(query.epsilon, query.x) * query.clean_metric, 0.0), 1.0)


def asr_upper_bound(query: PoisonGuaranteeQuery) -> float:
    """Guaranteed cap on expected backdoor success rate after at most x
    poisoned rows: 1 - e^(-x*eps) * (1 - clean ASR), clipped to [0, 1].
    At x = 0 the clean metric is returned exactly."""
    if query.x == 0:
        return query.clean_metric
    bound = 1.0 - _decay(query.epsilon, query.x) * (1.0 - query.clean_metric)
    return min(max(bound, 0.0), 1.0)


def attack_cost_lower_bound(clean_cost: float, x: int, epsilon: float,
                            cost_is_nonpositive: bool = False) -> float:
    """General attack-cost bound for an epsilon-DP learner.

    For a non-negative cost the poisoned expectation is at least
    e^(-x*eps) * clean_cost; for a non-positive cost it is at least
    e^(+x*eps) * clean_cost. The non-positive branch is exposed for
    completeness; the accuracy/ASR bounds above use the non-negative one.
    """
    if not isinstance(x, int) or isinstance(x, bool) or x < 0:
        raise ValueError(f"x must be a non-negative integer, got {x!r}")
    if math.isnan(epsilon) or epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon!r}")
    if cost_is_nonpositive and clean_cost > 0:
        raise ValueError("clean_cost must be <= 0 when cost_is_nonpositive is set")
    if not cost_is_nonpositive and clean_cost < 0:
        raise ValueError("clean_cost must be >= 0 for a non-negative cost function")
    if x == 0:
        return float(clean_cost)
    sign = 1.0 if cost_is_nonpositive else -1.0
    return float(math.exp(sign * x * epsilon) * clean_cost)


@dataclass(frozen=True)
class TriggerSpec:
    """Backdoor trigger: feature assignments plus source and target classes."""

    assignments: tuple[tuple[int, float], ...]
    source_class: int
    target_class: int

    def __post_init__(self) -> None:
        if isinstance(self.assignments, dict):
            object.__setattr__(self, "assignments",
                               tuple(sorted(self.assignments.items())))
        pairs = tuple((int(j), float(v)) for j, v in self.assignments)
        if not pairs:
            raise ValueError("trigger needs at least one feature assignment")
        if len({j for j, _ in pairs}) != len(pairs):
            raise ValueError("trigger assigns the same feature twice")
        object.__setattr__(self, "assignments", pairs)
        for name in ("source_class", "target_class"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
        if self.source_class == self.target_class:
            raise ValueError("source_class and target_class must differ")

    def validate_against(self, schema: DatasetSchema) -> None:
        for cls in (self.source_class, self.target_class):
            if cls >= schema.n_classes:
                raise ValueError(f"class index {cls} outside the schema's "
                                 f"{schema.n_classes} classes")
        for j, value in self.assignments:
            if j >= schema.n_features:
                raise ValueError(f"trigger feature {j} outside the schema's "
                                 f"{schema.n_features} features")
            spec = schema.features[j]
            if spec.kind == "numerical":
                lo, hi = spec.range
                if not (math.isfinite(value) and lo <= value <= hi):
                    raise ValueError(f"trigger value {value!r} outside feature "
                                     f"{spec.name!r} range [{lo}, {hi}]")
            else:
                if value != int(value) or not (0 <= int(value) < len(spec.categories)):
                    raise ValueError(f"trigger value {value!r} is not a category "
                                     f"index of feature {spec.name!r}")

    def apply(self, rows: np.ndarray) -> np.ndarray:
        stamped = np.array(rows, dtype=float, copy=True)
        for j, value in self.assignments:
            stamped[:, j] = value
        return stamped


def poison_backdoor(dataset: Dataset, trigger: TriggerSpec, x: int,
                    rng: RandomStream) -> Dataset:
    """Append x trigger-stamped copies of random source-class rows, labeled
    with the target class. Original rows are untouched; x = 0 returns the
    dataset as-is."""
    trigger.validate_against(dataset.schema)
    if not isinstance(x, int) or isinstance(x, bool) or x < 0:
        raise ValueError(f"x must be a non-negative integer, got {x!r}")
    if x == 0:
        return dataset
    source_idx = np.flatnonzero(dataset.labels == trigger.source_class)
    if source_idx.size == 0:
        raise ValueError(f"dataset has no rows of source class {trigger.source_class}")
    picks = source_idx[rng.integers(0, source_idx.size, size=x)]
    poison_rows = trigger.apply(dataset.rows[picks])
    rows = np.vstack([dataset.rows, poison_rows])
    labels = np.concatenate([dataset.labels,
                             np.full(x, trigger.target_class, dtype=np.int64)])
    return Dataset(dataset.schema.with_rows(dataset.n + x), rows, labels)


def attack_success_rate(model: TreeModel, test_dataset: Dataset,
                        trigger: TriggerSpec) -> float:
    """Fraction of source-class test rows predicted as the target class once
    the trigger is applied."""
    trigger.validate_against(test_dataset.schema)
    source_idx = np.flatnonzero(test_dataset.labels == trigger.source_class)
    if source_idx.size == 0:
        raise ValueError(f"test set has no rows of source class {trigger.source_class}")
    triggered = trigger.apply(test_dataset.rows[source_idx])
    predictions = predict_batch(model, triggered)
    return float(np.mean(predictions == trigger.target_class))


@dataclass
class RobustnessReport:
    """Clean-metric estimate, guarantee curve, and optional measurements.

    metric is "accuracy" (bound is a floor) or "asr" (bound is a cap).
    Curves are sorted by poison count x.
    """

    metric: str
    clean_metric_mean: float
    clean_metric_stderr: float
    guarantee_curve: list[tuple[int, float]]
    empirical_curve: list[tuple[int, float, float]] | None
    n_trials: int

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "clean_metric_mean": self.clean_metric_mean,
            "clean_metric_stderr": self.clean_metric_stderr,
            "n_trials": self.n_trials,
            "guarantee_curve": [{"x": x, "bound": b} for x, b in self.guarantee_curve],
            "empirical_curve": None if self.empirical_curve is None else [
                {"x": x, "mean": m, "stderr": s} for x, m, s in self.empirical_curve
            ],
        }

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "bound", "empirical_mean", "empirical_stderr"])
        empirical = {x: (m, s) for x, m, s in (self.empirical_curve or [])}
        for x, bound in self.guarantee_curve:
            mean, stderr = empirical.get(x, ("", ""))
            writer.writerow([x, repr(bound), mean if mean == "" else repr(mean),
                             stderr if stderr == "" else repr(stderr)])
        return buf.getvalue()


def _split_indices(n: int, test_fraction: float, rng: RandomStream):
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise ValueError("test fraction leaves no training rows")
    return order[n_test:], order[:n_test]


def _campaign_trial(dataset: Dataset, params: TrainerParams,
                    trigger: TriggerSpec | None, x_values: list[int],
                    seed: int, trial: int, test_fraction: float,
                    force_full_depth: bool) -> dict[int, float]:
    """Run one trial: one train/test split, one fit+measurement per x."""
    base = RandomStream(seed)
    train_idx, test_idx = _split_indices(dataset.n, test_fraction,
                                         base.substream(0, trial))
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    results: dict[int, float] = {}
    for x in x_values:
        if trigger is not None:
            poisoned = poison_backdoor(train, trigger, x, base.substream(1, x, trial))
        else:
            poisoned = train
        fit_params = replace(params, n_samples=poisoned.n)
        fit_seed = int(base.substream(2, x, trial).integers(0, 2**63))
        model = fit(poisoned, fit_params, fit_seed, force_full_depth=force_full_depth)
        if trigger is not None:
            results[x] = attack_success_rate(model, test, trigger)
        else:
            results[x] = float(np.mean(predict_batch(model, test.rows) == test.labels))
    return results


def run_poisoning_campaign(dataset: Dataset, params: TrainerParams,
                           attack: TriggerSpec | None, x_grid, n_trials: int,
                           seed: int, test_fraction: float = 0.2,
                           n_workers: int = 1,
                           force_full_depth: bool = False) -> RobustnessReport:
    """Estimate the clean metric, attach guarantee curves, and (for trigger
    attacks) measure the attack success rate at every poison count.

    Each trial draws its own train/test split; fits get fresh seeds per
    (x, trial). With a TriggerSpec the metric is ASR measured on the clean
    test split with the trigger applied at evaluation time; with attack=None
    only the accuracy guarantee is computed (there is no implemented
    accuracy attacker). Trials are deterministic given (seed, trial, x), so
    worker-pool execution returns the same report as sequential execution.

    force_full_depth trains the proof-clean trainer variant whose structure
    decisions read only noised data; the plain variant's raw stopping checks
    can react to poisoned rows more sharply than its privacy level admits,
    in which case the guarantee's premise no longer holds.
    """
    if params.n_samples != dataset.n:
        raise ValueError(f"params.n_samples = {params.n_samples} but dataset has "
                         f"{dataset.n} rows")
    if not isinstance(n_trials, int) or isinstance(n_trials, bool) or n_trials < 2:
        raise ValueError(f"n_trials must be an integer >= 2, got {n_trials!r}")
    x_list = sorted({int(x) for x in x_grid})
    if not x_list or x_list[0] < 0:
        raise ValueError(f"x_grid must be non-empty with non-negative entries, got {x_grid!r}")
    if attack is not None:
        attack.validate_against(dataset.schema)

    # x = 0 is always evaluated: it estimates the clean expectation the
    # guarantees are anchored to. Accuracy mode has no attacker, so only
    # the clean point is measured.
    x_values = sorted(set(x_list) | {0}) if attack is not None else [0]
    trial_args = [(dataset, params, attack, x_values, seed, t, test_fraction,
                   force_full_depth)
                  for t in range(n_trials)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            per_trial = list(pool.map(_campaign_trial_star, trial_args))
    else:
        per_trial = [_campaign_trial(*args) for args in trial_args]

    def mean_stderr(values: np.ndarray) -> tuple[float, float]:
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))

    clean = np.array([trial[0] for trial in per_trial])
    clean_mean, clean_stderr = mean_stderr(clean)

    metric = "asr" if attack is not None else "accuracy"
    bound_of = asr_upper_bound if attack is not None else accuracy_lower_bound
    guarantee = [(x, bound_of(PoisonGuaranteeQuery(params.epsilon_total, x, clean_mean)))
                 for x in x_list]
    empirical = None
    if attack is not None:
        empirical = []
        for x in x_list:
            vals = np.array([trial[x] for trial in per_trial])
            mean, stderr = mean_stderr(vals)
            empirical.append((x, mean, stderr))
    return RobustnessReport(metric=metric, clean_metric_mean=clean_mean,
                            clean_metric_stderr=clean_stderr,
                            guarantee_curve=guarantee, empirical_curve=empirical,
                            n_trials=n_trials)


def _campaign_trial_star(args):
    return _campaign_trial(*args)
