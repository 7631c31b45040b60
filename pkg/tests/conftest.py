"""Shared fixture data for the test suite.

All builders are deterministic functions of their arguments; pytest fixtures
only add caching and tmp-file plumbing on top.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from privatree.preprocess import Dataset, DatasetSchema, FeatureSpec

# The nursery data is the full factorial design over these eight attributes
# (12,960 rows). Binarized target: not_recom vs everything else, which in the
# original data coincides exactly with health == not_recom.
NURSERY_ATTRIBUTES = (
    ("parents", ("usual", "pretentious", "great_pret")),
    ("has_nurs", ("proper", "less_proper", "improper", "critical", "very_crit")),
    ("form", ("complete", "completed", "incomplete", "foster")),
    ("children", ("1", "2", "3", "more")),
    ("housing", ("convenient", "less_conv", "critical")),
    ("finance", ("convenient", "inconv")),
    ("social", ("nonprob", "slightly_prob", "problematic")),
    ("health", ("recommended", "priority", "not_recom")),
)


def make_nursery() -> Dataset:
    features = tuple(FeatureSpec(name, "categorical", categories=cats)
                     for name, cats in NURSERY_ATTRIBUTES)
    sizes = [len(cats) for _, cats in NURSERY_ATTRIBUTES]
    rows = np.array(list(itertools.product(*(range(s) for s in sizes))), dtype=float)
    health_col = rows[:, 7]
    not_recom_idx = NURSERY_ATTRIBUTES[7][1].index("not_recom")
    labels = (health_col == not_recom_idx).astype(np.int64)
    schema = DatasetSchema(features, ("rest", "not_recom"), n_rows=rows.shape[0])
    return Dataset(schema, rows, labels)


def make_separable(n: int = 200, seed: int = 0) -> Dataset:
    """Balanced one-feature dataset, class = value > 0.5, with a clear gap
    straddling the median so exact deciles can separate it perfectly."""
    assert n % 2 == 0
    rng = np.random.default_rng(seed)
    low = rng.uniform(0.02, 0.45, n // 2)
    high = rng.uniform(0.55, 0.98, n // 2)
    values = np.concatenate([low, high])
    order = rng.permutation(n)
    values = values[order]
    labels = (values > 0.5).astype(np.int64)
    schema = DatasetSchema((FeatureSpec("f0", "numerical", range=(0.0, 1.0)),),
                           ("neg", "pos"), n_rows=n)
    return Dataset(schema, values.reshape(-1, 1), labels)


def make_backdoor_fixture(n: int = 2000, n_informative: int = 15,
                          cluster_width: float = 0.01, seed: int = 0) -> Dataset:
    """Two very tight clusters separable on every informative feature, plus
    one 'corner' trigger feature that is constantly 0.0 in clean data.

    The clusters are deliberately narrow: poisoned copies of source rows then
    share their block's informative values, so splits on informative features
    cannot peel poisons off their source cluster and the raw stopping checks
    behave the same with and without poisoning.
    """
    assert n % 2 == 0
    rng = np.random.default_rng(seed)
    half = n // 2
    w = cluster_width / 2.0
    cluster0 = rng.uniform(0.2 - w, 0.2 + w, size=(half, n_informative))
    cluster1 = rng.uniform(0.8 - w, 0.8 + w, size=(half, n_informative))
    informative = np.vstack([cluster0, cluster1])
    trigger_col = np.zeros((n, 1))
    rows = np.hstack([informative, trigger_col])
    labels = np.concatenate([np.zeros(half, dtype=np.int64),
                             np.ones(half, dtype=np.int64)])
    order = rng.permutation(n)
    features = tuple(FeatureSpec(f"f{j}", "numerical", range=(0.0, 1.0))
                     for j in range(n_informative)) + (
        FeatureSpec("trig", "numerical", range=(0.0, 1.0)),)
    schema = DatasetSchema(features, ("clean", "target"), n_rows=n)
    return Dataset(schema, rows[order], labels[order])


def make_random_mixed_dataset(seed: int, max_rows: int = 200) -> Dataset:
    """Small random dataset with mixed feature kinds for oracle-equivalence
    and serialization round-trip tests."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, max_rows + 1))
    n_features = int(rng.integers(1, 5))
    n_classes = 3 if seed % 5 == 4 else 2
    features = []
    columns = []
    for j in range(n_features):
        if rng.uniform() < 0.5:
            features.append(FeatureSpec(f"num{j}", "numerical", range=(0.0, 1.0)))
            columns.append(rng.uniform(0.0, 1.0, n))
        else:
            n_cats = int(rng.integers(2, 6))
            features.append(FeatureSpec(
                f"cat{j}", "categorical",
                categories=tuple(f"c{j}_{t}" for t in range(n_cats))))
            columns.append(rng.integers(0, n_cats, n).astype(float))
    rows = np.column_stack(columns)
    if rng.uniform() < 0.5:
        labels = rng.integers(0, n_classes, n).astype(np.int64)
    else:
        # correlate the label with the first feature so trees have signal
        pivot = np.median(rows[:, 0])
        labels = ((rows[:, 0] > pivot).astype(np.int64)
                  + (rng.uniform(size=n) < 0.1).astype(np.int64)) % n_classes
    class_labels = tuple(f"k{c}" for c in range(n_classes))
    schema = DatasetSchema(tuple(features), class_labels, n_rows=n)
    return Dataset(schema, rows, labels.astype(np.int64))


def write_dataset_files(dataset: Dataset, directory: Path, stem: str = "data",
                        label_column: str = "label") -> tuple[Path, Path]:
    """Materialize a Dataset as CSV + schema JSON for CLI tests."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    schema_path = directory / f"{stem}.schema.json"
    schema_path.write_text(json.dumps(dataset.schema.feature_dict(), indent=1),
                           encoding="utf-8")
    data_path = directory / f"{stem}.csv"
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write(",".join([f.name for f in dataset.schema.features] + [label_column]) + "\n")
        for i in range(dataset.n):
            cells = []
            for j, spec in enumerate(dataset.schema.features):
                v = dataset.rows[i, j]
                cells.append(spec.categories[int(v)] if spec.kind == "categorical"
                             else repr(float(v)))
            cells.append(dataset.schema.class_labels[int(dataset.labels[i])])
            fh.write(",".join(cells) + "\n")
    return data_path, schema_path


@pytest.fixture(scope="session")
def nursery_dataset() -> Dataset:
    return make_nursery()


@pytest.fixture(scope="session")
def separable_dataset() -> Dataset:
    return make_separable(n=200, seed=0)


@pytest.fixture(scope="session")
def backdoor_dataset() -> Dataset:
    return make_backdoor_fixture(n=2000, seed=0)
