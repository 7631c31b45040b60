"""Dataset ingestion and private decile binning.

Feature ranges, category sets, class labels and the row count are treated as
public metadata; the feature *values* are private. Numerical features are
summarized by 10 bins whose interior edges come from a per-quantile
exponential mechanism over the data-induced intervals.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mechanisms import RandomStream, _epsilon_of

__all__ = [
    "LoadError",
    "FeatureSpec",
    "DatasetSchema",
    "Dataset",
    "BinEdges",
    "load_schema",
    "load_dataset",
    "private_quantile",
    "private_decile_edges",
    "decile_edges_for_dataset",
    "bin_value",
]

N_BINS = 10
DECILES = tuple((i + 1) / 10 for i in range(9))
_MISSING_MARKERS = {"", "?"}


class LoadError(ValueError):
    """Raised when a schema or data file cannot be turned into a Dataset."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "numerical" | "categorical"
    range: tuple[float, float] | None = None
    categories: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("feature name must be non-empty")
        if self.kind == "numerical":
            if self.range is None or self.categories is not None:
                raise ValueError(f"numerical feature {self.name!r} needs a range and no categories")
            lo, hi = self.range
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"feature {self.name!r}: range must satisfy lo < hi, got {self.range}")
            object.__setattr__(self, "range", (float(lo), float(hi)))
        elif self.kind == "categorical":
            if self.categories is None or self.range is not None:
                raise ValueError(f"categorical feature {self.name!r} needs categories and no range")
            cats = tuple(str(c) for c in self.categories)
            if len(cats) == 0 or len(set(cats)) != len(cats):
                raise ValueError(f"feature {self.name!r}: categories must be non-empty and unique")
            object.__setattr__(self, "categories", cats)
        else:
            raise ValueError(f"feature {self.name!r}: kind must be 'numerical' or 'categorical'")


@dataclass(frozen=True)
class DatasetSchema:
    features: tuple[FeatureSpec, ...]
    class_labels: tuple[str, ...]
    n_rows: int

    def __post_init__(self) -> None:
        if len(self.features) < 1:
            raise ValueError("schema needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if len(self.class_labels) < 2:
            raise ValueError("schema needs at least two class labels")
        if len(set(self.class_labels)) != len(self.class_labels):
            raise ValueError("class labels must be unique")
        if not isinstance(self.n_rows, int) or isinstance(self.n_rows, bool) or self.n_rows < 1:
            raise ValueError(f"n_rows must be a positive integer, got {self.n_rows!r}")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    def feature_dict(self) -> dict:
        feats = []
        for f in self.features:
            if f.kind == "numerical":
                feats.append({"name": f.name, "kind": "numerical", "range": list(f.range)})
            else:
                feats.append({"name": f.name, "kind": "categorical", "categories": list(f.categories)})
        return {"features": feats, "classes": list(self.class_labels)}

    def hash_hex(self) -> str:
        # Covers features + classes only; n_rows varies across splits of the
        # same data and must not change the hash.
        canonical = json.dumps(self.feature_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_rows(self, n_rows: int) -> "DatasetSchema":
        return replace(self, n_rows=n_rows)


@dataclass
class Dataset:
    """Validated feature matrix plus labels.

    rows is (n, m) float64; categorical cells hold category indices.
    n_dropped and n_clipped report what the loader had to do to the raw file.
    """

    schema: DatasetSchema
    rows: np.ndarray
    labels: np.ndarray
    n_dropped: int = 0
    n_clipped: int = 0

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def validate(self) -> None:
        if self.rows.ndim != 2:
            raise ValueError("rows must be a 2-D matrix")
        n, m = self.rows.shape
        if m != self.schema.n_features:
            raise ValueError(f"rows have {m} columns, schema declares {self.schema.n_features}")
        if self.labels.shape != (n,):
            raise ValueError("labels length must equal the row count")
        if n != self.schema.n_rows:
            raise ValueError(f"schema says {self.schema.n_rows} rows, matrix has {n}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.schema.n_classes):
            raise ValueError("labels must index the schema's class list")
        for j, spec in enumerate(self.schema.features):
            col = self.rows[:, j]
            if not np.all(np.isfinite(col)):
                raise ValueError(f"feature {spec.name!r} contains non-finite values")
            if spec.kind == "numerical":
                lo, hi = spec.range
                if col.size and (col.min() < lo or col.max() > hi):
                    raise ValueError(f"feature {spec.name!r} has values outside its public range")
            else:
                if not np.all(col == np.floor(col)):
                    raise ValueError(f"feature {spec.name!r} has non-integral category codes")
                if col.size and (col.min() < 0 or col.max() >= len(spec.categories)):
                    raise ValueError(f"feature {spec.name!r} has out-of-range category codes")

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("subset needs at least one row")
        return Dataset(self.schema.with_rows(int(idx.size)),
                       self.rows[idx], self.labels[idx])


@dataclass(frozen=True)
class BinEdges:
    """The 9 interior edges of a feature's 10 bins, sorted nondecreasing.

    Duplicate edges are legal (degenerate data); the resulting empty bins are
    harmless and keep the histogram layout fixed at 10 bins everywhere.
    """

    edges: tuple[float, ...]

    def __post_init__(self) -> None:
        edges = tuple(float(e) for e in self.edges)
        if len(edges) != N_BINS - 1:
            raise ValueError(f"expected {N_BINS - 1} edges, got {len(edges)}")
        if any(not math.isfinite(e) for e in edges):
            raise ValueError("edges must be finite")
        if any(edges[i] > edges[i + 1] for i in range(len(edges) - 1)):
            raise ValueError("edges must be sorted nondecreasing")
        object.__setattr__(self, "edges", edges)


def load_schema(schema_path) -> tuple[tuple[FeatureSpec, ...], tuple[str, ...]]:
    """Parse a schema JSON file into feature specs and class labels."""
    try:
        with open(schema_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise LoadError(f"schema file {schema_path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "features" not in raw or "classes" not in raw:
        raise LoadError(f"schema file {schema_path}: expected an object with 'features' and 'classes'")
    features = []
    for i, item in enumerate(raw["features"]):
        if not isinstance(item, dict) or "name" not in item or "kind" not in item:
            raise LoadError(f"schema file {schema_path}: feature #{i} needs 'name' and 'kind'")
        try:
            if item["kind"] == "numerical":
                rng = item.get("range")
                if not isinstance(rng, (list, tuple)) or len(rng) != 2:
                    raise ValueError("numerical feature needs 'range': [lo, hi]")
                features.append(FeatureSpec(str(item["name"]), "numerical",
                                            range=(float(rng[0]), float(rng[1]))))
            else:
                cats = item.get("categories")
                if not isinstance(cats, (list, tuple)):
                    raise ValueError("categorical feature needs 'categories'")
                features.append(FeatureSpec(str(item["name"]), str(item["kind"]),
                                            categories=tuple(str(c) for c in cats)))
        except ValueError as exc:
            raise LoadError(f"schema file {schema_path}: feature {item.get('name', i)!r}: {exc}") from exc
    classes = tuple(str(c) for c in raw["classes"])
    if len(classes) < 2:
        raise LoadError(f"schema file {schema_path}: need at least two classes")
    return tuple(features), classes


def load_dataset(csv_path, schema_path, label_column: str = "label") -> Dataset:
    """Load an RFC-4180 CSV with header against a JSON schema.

    Rows containing missing values ('' or '?') are dropped and counted.
    Out-of-range numerical cells are clipped to the public range and counted.
    Unknown categories or non-numeric text in numerical columns raise
    LoadError naming the row and column.
    """
    features, classes = load_schema(schema_path)
    class_index = {c: k for k, c in enumerate(classes)}
    try:
        fh = open(csv_path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise LoadError(f"cannot open data file {csv_path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"data file {csv_path} is empty") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise LoadError(f"data file {csv_path}: duplicate column names in header")
        expected = {f.name for f in features} | {label_column}
        if set(header) != expected:
            missing = sorted(expected - set(header))
            extra = sorted(set(header) - expected)
            raise LoadError(f"data file {csv_path}: header mismatch"
                            f" (missing: {missing}, unexpected: {extra})")
        col_of = {name: header.index(name) for name in header}
        label_col = col_of[label_column]
        feature_cols = [col_of[f.name] for f in features]

        matrix: list[list[float]] = []
        labels: list[int] = []
        n_dropped = 0
        n_clipped = 0
        for row_no, row in enumerate(reader, start=2):  # header is line 1
            if len(row) != len(header):
                raise LoadError(f"data file {csv_path}, line {row_no}: expected "
                                f"{len(header)} cells, got {len(row)}")
            cells = [c.strip() for c in row]
            if any(cells[c] in _MISSING_MARKERS for c in feature_cols + [label_col]):
                n_dropped += 1
                continue
            label_text = cells[label_col]
            if label_text not in class_index:
                raise LoadError(f"data file {csv_path}, line {row_no}, column "
                                f"{label_column!r}: unknown class {label_text!r}")
            parsed = []
            for spec, c in zip(features, feature_cols):
                text = cells[c]
                if spec.kind == "numerical":
                    try:
                        value = float(text)
                    except ValueError:
                        raise LoadError(f"data file {csv_path}, line {row_no}, column "
                                        f"{spec.name!r}: non-numeric value {text!r}") from None
                    if not math.isfinite(value):
                        raise LoadError(f"data file {csv_path}, line {row_no}, column "
                                        f"{spec.name!r}: non-finite value {text!r}")
                    lo, hi = spec.range
                    if value < lo or value > hi:
                        value = min(max(value, lo), hi)
                        n_clipped += 1
                    parsed.append(value)
                else:
                    try:
                        parsed.append(float(spec.categories.index(text)))
                    except ValueError:
                        raise LoadError(f"data file {csv_path}, line {row_no}, column "
                                        f"{spec.name!r}: unknown category {text!r}") from None
            matrix.append(parsed)
            labels.append(class_index[label_text])

    if not matrix:
        raise LoadError(f"data file {csv_path}: no usable rows after dropping missing values")
    schema = DatasetSchema(features, classes, n_rows=len(matrix))
    return Dataset(schema, np.asarray(matrix, dtype=float),
                   np.asarray(labels, dtype=np.int64),
                   n_dropped=n_dropped, n_clipped=n_clipped)


def private_quantile(values, value_range: tuple[float, float], q: float,
                     budget, rng: RandomStream) -> float:
    """Single private quantile via the exponential mechanism over intervals.

    Values are clipped to the public range and sorted; the gaps between
    consecutive order statistics (padded with the range endpoints) are
    sampled with probability proportional to
    length * exp(-eps * |rank - q*n| / 2), then a uniform point inside the
    chosen gap is returned. Empty input falls back to a uniform draw on the
    range.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"range must satisfy lo < hi, got {value_range!r}")
    if not (0.0 < q < 1.0):
        raise ValueError(f"q must lie in (0, 1), got {q!r}")
    eps = _epsilon_of(budget)
    vals = np.sort(np.clip(np.asarray(values, dtype=float), lo, hi))
    n = vals.size
    if n == 0:
        return float(rng.uniform(lo, hi))
    support = np.concatenate(([lo], vals, [hi]))
    lengths = np.diff(support)
    utilities = -np.abs(np.arange(n + 1, dtype=float) - q * n)
    if math.isinf(eps):
        pick = int(np.argmax(utilities))
    else:
        weights = lengths * np.exp(eps * (utilities - utilities.max()) / 2.0)
        total = weights.sum()
        if not math.isfinite(total) or total <= 0.0:
            pick = int(np.argmax(utilities))
        else:
            cdf = np.cumsum(weights)
            pick = int(np.searchsorted(cdf, rng.uniform() * total, side="right"))
            pick = min(pick, n)
    return float(rng.uniform(support[pick], support[pick + 1]))


def private_decile_edges(values, value_range: tuple[float, float], budget_total,
                         rng: RandomStream, backend=None) -> BinEdges:
    """Nine interior deciles, each computed at budget_total / 9.

    The per-quantile calls compose sequentially within one feature column.
    ``backend`` is the single seam for swapping the quantile mechanism; it
    must accept (values, value_range, q, budget, rng).
    """
    if backend is None:
        backend = private_quantile
    eps_total = _epsilon_of(budget_total)
    eps_each = eps_total / len(DECILES)
    edges = [backend(values, value_range, q, eps_each, rng) for q in DECILES]
    return BinEdges(tuple(sorted(edges)))


def decile_edges_for_dataset(rows: np.ndarray, schema: DatasetSchema, budget_total,
                             rng: RandomStream, backend=None) -> dict[int, BinEdges]:
    """Decile edges for every numerical feature, one substream per feature.

    Feature j's edges depend only on column j and substream (rng, j), so
    columns can be processed in any order or in parallel.
    """
    rows = np.asarray(rows, dtype=float)
    out: dict[int, BinEdges] = {}
    for j, spec in enumerate(schema.features):
        if spec.kind != "numerical":
            continue
        out[j] = private_decile_edges(rows[:, j], spec.range, budget_total,
                                      rng.substream(j), backend=backend)
    return out


def bin_value(value: float, edges: BinEdges) -> int:
    """Bin index in [0, 9]: the number of edges strictly below the value.

    A value equal to an edge lands left of it, matching the 'value <= t goes
    left' split rule.
    """
    return int(np.searchsorted(np.asarray(edges.edges), value, side="left"))


def bin_column(column: np.ndarray, edges: BinEdges) -> np.ndarray:
    """Vectorized bin_value over a column."""
    return np.searchsorted(np.asarray(edges.edges), column, side="left").astype(np.int64)
