"""Histogram-based differentially-private decision-tree training.

Training allocates the budget once, computes private decile bins per
numerical feature, and then recursively: noises one class histogram per
feature at the current node, picks the Gini-minimizing split
deterministically from the noised counts (privacy already paid by the
histogram noise), partitions the raw rows, and labels leaves with
permute-and-flip over raw class counts. A data-independent random-split
trainer is included as a baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .budget import BudgetLedger, TrainerParams, allocate_budget
from .mechanisms import (RandomStream, UtilityVector, _epsilon_of,
                         permute_and_flip, two_sided_geometric_noise)
from .preprocess import (N_BINS, BinEdges, Dataset, DatasetSchema, bin_column,
                         decile_edges_for_dataset)

__all__ = [
    "NoisyHistogram",
    "NumericalSplit",
    "CategoricalSplit",
    "Leaf",
    "Internal",
    "ModelParams",
    "TreeModel",
    "ModelFormatError",
    "noisy_class_histogram",
    "weighted_gini",
    "best_numerical_split",
    "order_categories_binary",
    "best_categorical_split",
    "fit",
    "fit_random_baseline",
    "predict",
    "predict_batch",
    "serialize",
    "deserialize",
    "tree_depth",
    "leaf_count",
    "trainer_params_for",
]

FORMAT_VERSION = 1

# Substream keys under the fit seed: per-feature quantile streams hang off
# _QUANTILES, the recursion (histograms + leaf labels) consumes _TREE in DFS
# order, and the baseline's data-independent skeleton uses _STRUCTURE.
_QUANTILES = 0
_TREE = 1
_STRUCTURE = 2


@dataclass
class NoisyHistogram:
    """Per-(feature, bin, class) noised counts for one tree node.

    counts[j] has shape (bins_j, n_classes): 10 bins for numerical features,
    one bin per category otherwise. Cells are exact counts plus one pass of
    two-sided geometric noise and may be negative; impurity scoring clamps
    them without altering the stored values.
    """

    counts: list[np.ndarray]

    @property
    def n_classes(self) -> int:
        return self.counts[0].shape[1]


@dataclass(frozen=True)
class NumericalSplit:
    feature: int
    threshold: float  # one of the feature's bin edges; value <= threshold goes left


@dataclass(frozen=True)
class CategoricalSplit:
    feature: int
    left_set: frozenset  # category indices routed left; all others go right

    def __post_init__(self) -> None:
        object.__setattr__(self, "left_set", frozenset(int(c) for c in self.left_set))
        if not self.left_set:
            raise ValueError("left_set must be non-empty")


SplitRule = NumericalSplit | CategoricalSplit


@dataclass(frozen=True)
class Leaf:
    class_index: int


@dataclass(frozen=True)
class Internal:
    rule: SplitRule
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Leaf | Internal


@dataclass(frozen=True)
class ModelParams:
    epsilon: float
    max_depth: int
    max_leaf_error: float
    seed: int


@dataclass
class TreeModel:
    """Fitted tree plus the public metadata needed to apply and audit it."""

    root: TreeNode
    params: ModelParams
    schema_hash: str
    bin_edges: dict[int, BinEdges]
    ledger: BudgetLedger | None = field(default=None, compare=False)


class ModelFormatError(ValueError):
    """Raised when model bytes cannot be decoded."""


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def leaf_count(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 1
    return leaf_count(node.left) + leaf_count(node.right)


def trainer_params_for(dataset: Dataset, epsilon: float, max_depth: int,
                       max_leaf_error: float = 0.01) -> TrainerParams:
    """TrainerParams matching a dataset's public row and class counts."""
    return TrainerParams(epsilon_total=epsilon, max_depth=max_depth,
                         n_samples=dataset.n, n_classes=dataset.schema.n_classes,
                         max_leaf_error=max_leaf_error)


def noisy_class_histogram(rows: np.ndarray, labels: np.ndarray, schema: DatasetSchema,
                          edges_per_feature: dict[int, BinEdges], eps_num, eps_cat,
                          rng: RandomStream) -> NoisyHistogram:
    """Exact per-(feature, bin, class) counts plus one geometric-noise pass.

    Numerical features are binned by their precomputed edges and noised at
    eps_num; categorical features use one bin per category and eps_cat. Noise
    is drawn feature by feature in schema order, cells flattened bin-major.
    The exact counts never leave this function.
    """
    eps_num = _epsilon_of(eps_num)
    eps_cat = _epsilon_of(eps_cat)
    rows = np.asarray(rows, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    k = schema.n_classes
    counts: list[np.ndarray] = []
    for j, spec in enumerate(schema.features):
        if spec.kind == "numerical":
            codes = bin_column(rows[:, j], edges_per_feature[j]) if rows.size else \
                np.zeros(0, dtype=np.int64)
            n_bins = N_BINS
            eps = eps_num
        else:
            codes = rows[:, j].astype(np.int64) if rows.size else np.zeros(0, dtype=np.int64)
            n_bins = len(spec.categories)
            eps = eps_cat
        exact = np.bincount(codes * k + labels, minlength=n_bins * k).reshape(n_bins, k)
        counts.append(two_sided_geometric_noise(exact.astype(np.int64), eps, rng))
    return NoisyHistogram(counts)


def weighted_gini(left_counts, right_counts) -> float:
    """Weighted Gini impurity of a two-way split over per-class counts.

    Negative (noisy) counts are clamped to zero first. An empty side
    contributes zero at zero weight; if both sides are empty the sentinel
    worst value 1 - 1/K is returned so such a split is never preferred over
    any informative one.
    """
    left = np.maximum(np.asarray(left_counts, dtype=float), 0.0)
    right = np.maximum(np.asarray(right_counts, dtype=float), 0.0)
    if left.shape != right.shape or left.ndim != 1 or left.size < 2:
        raise ValueError("left and right must be equal-length vectors of >= 2 class counts")
    n_left = left.sum()
    n_right = right.sum()
    total = n_left + n_right
    if total <= 0.0:
        return 1.0 - 1.0 / left.size
    gini = 0.0
    if n_left > 0.0:
        gini += (n_left / total) * (1.0 - (left @ left) / (n_left * n_left))
    if n_right > 0.0:
        gini += (n_right / total) * (1.0 - (right @ right) / (n_right * n_right))
    return float(gini)


def best_numerical_split(hist: NoisyHistogram, feature: int) -> tuple[int, float]:
    """Gini-minimizing boundary for a numerical feature's 10 bins.

    Boundary b sends bins <= b left and bins > b right, on clamped cumulative
    counts. Ties break toward the smallest boundary index. Returns
    (boundary index in [0, 8], gini).
    """
    clamped = np.maximum(hist.counts[feature], 0)
    cumulative = np.cumsum(clamped, axis=0)
    total = cumulative[-1]
    best_b, best_g = 0, math.inf
    for b in range(N_BINS - 1):
        g = weighted_gini(cumulative[b], total - cumulative[b])
        if g < best_g:
            best_b, best_g = b, g
    return best_b, best_g


def order_categories_binary(hist: NoisyHistogram, feature: int) -> np.ndarray:
    """Categories sorted ascending by clamped class-0 ratio (binary only).

    A category with zero clamped total counts as ratio 0.5; ties keep the
    original category order.
    """
    clamped = np.maximum(hist.counts[feature], 0)
    if clamped.shape[1] != 2:
        raise ValueError("binary category ordering requires exactly 2 classes")
    totals = clamped.sum(axis=1)
    ratios = np.where(totals > 0, clamped[:, 0] / np.maximum(totals, 1), 0.5)
    return np.argsort(ratios, kind="stable")


def best_categorical_split(hist: NoisyHistogram, feature: int,
                           ordering: np.ndarray) -> tuple[frozenset, float] | None:
    """Best prefix cut of the given category ordering, or None if unsplittable.

    Scans prefixes of length 1..C-1; ties break toward the shorter prefix.
    Single-category features have no candidate and yield None.
    """
    ordering = np.asarray(ordering, dtype=np.int64)
    n_cats = hist.counts[feature].shape[0]
    if n_cats < 2:
        return None
    if sorted(ordering.tolist()) != list(range(n_cats)):
        raise ValueError("ordering must be a permutation of the category indices")
    clamped = np.maximum(hist.counts[feature], 0)[ordering]
    cumulative = np.cumsum(clamped, axis=0)
    total = cumulative[-1]
    best_t, best_g = 1, math.inf
    for t in range(1, n_cats):
        g = weighted_gini(cumulative[t - 1], total - cumulative[t - 1])
        if g < best_g:
            best_t, best_g = t, g
    return frozenset(int(c) for c in ordering[:best_t]), best_g


def _best_split(hist: NoisyHistogram, schema: DatasetSchema,
                edges: dict[int, BinEdges]) -> tuple[SplitRule, float] | None:
    """Global argmin over all features; ties go to the lowest feature index."""
    best: tuple[SplitRule, float] | None = None
    for j, spec in enumerate(schema.features):
        if spec.kind == "numerical":
            b, g = best_numerical_split(hist, j)
            rule: SplitRule = NumericalSplit(j, edges[j].edges[b])
        else:
            if schema.n_classes == 2:
                ordering = order_categories_binary(hist, j)
            else:
                ordering = np.arange(len(spec.categories))
            found = best_categorical_split(hist, j, ordering)
            if found is None:
                continue
            left_set, g = found
            rule = CategoricalSplit(j, left_set)
        if best is None or g < best[1]:
            best = (rule, g)
    return best


def _route_left(rule: SplitRule, column: np.ndarray) -> np.ndarray:
    if isinstance(rule, NumericalSplit):
        return column <= rule.threshold
    lut = np.zeros(max(int(column.max(initial=-1)) + 1, max(rule.left_set) + 1), dtype=bool)
    lut[list(rule.left_set)] = True
    return lut[column.astype(np.int64)]


def _validate_fit_args(dataset: Dataset, params: TrainerParams) -> None:
    if dataset.n < 1:
        raise ValueError("cannot fit on an empty dataset")
    if params.n_samples != dataset.n:
        raise ValueError(f"params.n_samples = {params.n_samples} but dataset has {dataset.n} rows")
    if params.n_classes != dataset.schema.n_classes:
        raise ValueError(f"params.n_classes = {params.n_classes} but schema declares "
                         f"{dataset.schema.n_classes}")


def fit(dataset: Dataset, params: TrainerParams, seed: int,
        force_full_depth: bool = False) -> TreeModel:
    """Train a private tree.

    Stopping tests follow the plain recursion: depth exhausted, at most one
    raw row, or a single raw class. force_full_depth disables the two
    data-dependent checks and always recurses to max_depth, for callers who
    want structure decisions to read only noised data.
    """
    _validate_fit_args(dataset, params)
    plan = allocate_budget(params)
    root_stream = RandomStream(seed)
    edges = decile_edges_for_dataset(dataset.rows, dataset.schema,
                                     plan.eps_quantiles,
                                     root_stream.substream(_QUANTILES))
    tree_rng = root_stream.substream(_TREE)
    schema = dataset.schema
    k = schema.n_classes

    def label_leaf(label_subset: np.ndarray) -> Leaf:
        class_counts = np.bincount(label_subset, minlength=k).astype(float)
        choice = permute_and_flip(UtilityVector(tuple(class_counts), 1.0),
                                  plan.eps_leaf, tree_rng)
        return Leaf(int(choice))

    def fit_tree(idx: np.ndarray, depth_left: int) -> TreeNode:
        label_subset = dataset.labels[idx]
        stop = depth_left == 0
        if not force_full_depth:
            stop = stop or idx.size <= 1 or np.unique(label_subset).size == 1
        if stop:
            return label_leaf(label_subset)
        hist = noisy_class_histogram(dataset.rows[idx], label_subset, schema,
                                     edges, plan.eps_node_num, plan.eps_node_cat,
                                     tree_rng)
        found = _best_split(hist, schema, edges)
        if found is None:  # no splittable feature at all
            return label_leaf(label_subset)
        rule, _ = found
        go_left = _route_left(rule, dataset.rows[idx, rule.feature])
        return Internal(rule,
                        fit_tree(idx[go_left], depth_left - 1),
                        fit_tree(idx[~go_left], depth_left - 1))

    root = fit_tree(np.arange(dataset.n), params.max_depth)
    ledger = BudgetLedger.from_plan(plan, params, depth_used=tree_depth(root))
    model_params = ModelParams(params.epsilon_total, params.max_depth,
                               params.max_leaf_error, int(seed))
    return TreeModel(root, model_params, schema.hash_hex(), edges, ledger)


def fit_random_baseline(dataset: Dataset, params: TrainerParams, seed: int) -> TreeModel:
    """Random-structure comparator: splits are data-independent.

    Builds a full depth-d skeleton from the public schema alone (uniform
    feature, uniform threshold in the public range or a uniform non-trivial
    category subset), then spends the entire budget labeling leaves with
    permute-and-flip.
    """
    _validate_fit_args(dataset, params)
    schema = dataset.schema
    root_stream = RandomStream(seed)
    struct_rng = root_stream.substream(_STRUCTURE)
    label_rng = root_stream.substream(_TREE)
    k = schema.n_classes
    splittable = [j for j, s in enumerate(schema.features)
                  if s.kind == "numerical" or len(s.categories) >= 2]

    def build_skeleton(depth_left: int):
        if depth_left == 0 or not splittable:
            return None
        j = splittable[int(struct_rng.integers(0, len(splittable)))]
        spec = schema.features[j]
        if spec.kind == "numerical":
            lo, hi = spec.range
            rule: SplitRule = NumericalSplit(j, float(struct_rng.uniform(lo, hi)))
        else:
            n_cats = len(spec.categories)
            while True:
                include = struct_rng.uniform(size=n_cats) < 0.5
                if 0 < include.sum() < n_cats:
                    break
            rule = CategoricalSplit(j, frozenset(np.flatnonzero(include).tolist()))
        return (rule, build_skeleton(depth_left - 1), build_skeleton(depth_left - 1))

    def realize(skeleton, idx: np.ndarray) -> TreeNode:
        if skeleton is None:
            class_counts = np.bincount(dataset.labels[idx], minlength=k).astype(float)
            choice = permute_and_flip(UtilityVector(tuple(class_counts), 1.0),
                                      params.epsilon_total, label_rng)
            return Leaf(int(choice))
        rule, left_s, right_s = skeleton
        go_left = _route_left(rule, dataset.rows[idx, rule.feature])
        return Internal(rule, realize(left_s, idx[go_left]),
                        realize(right_s, idx[~go_left]))

    root = realize(build_skeleton(params.max_depth), np.arange(dataset.n))
    ledger = BudgetLedger.for_random_baseline(params.epsilon_total, params.max_depth,
                                              depth_used=tree_depth(root))
    model_params = ModelParams(params.epsilon_total, params.max_depth,
                               params.max_leaf_error, int(seed))
    return TreeModel(root, model_params, schema.hash_hex(), {}, ledger)


def predict(model: TreeModel, row) -> int:
    """Route one row to a leaf: value <= threshold goes left for numerical
    rules, membership in left_set goes left for categorical rules (unseen
    categories go right)."""
    node = model.root
    while isinstance(node, Internal):
        rule = node.rule
        if rule.feature >= len(row):
            raise ValueError(f"row has {len(row)} values but the model needs "
                             f"feature {rule.feature}")
        try:
            value = float(row[rule.feature])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"row value at feature {rule.feature} is not numeric") from exc
        if isinstance(rule, NumericalSplit):
            go_left = value <= rule.threshold
        else:
            go_left = int(value) in rule.left_set
        node = node.left if go_left else node.right
    return node.class_index


def predict_batch(model: TreeModel, rows) -> np.ndarray:
    """Vectorized predict over an (n, m) matrix."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2:
        raise ValueError("rows must be a 2-D matrix")
    out = np.empty(rows.shape[0], dtype=np.int64)

    def walk(node: TreeNode, idx: np.ndarray) -> None:
        if isinstance(node, Leaf):
            out[idx] = node.class_index
            return
        if node.rule.feature >= rows.shape[1]:
            raise ValueError(f"rows have {rows.shape[1]} columns but the model "
                             f"needs feature {node.rule.feature}")
        go_left = _route_left(node.rule, rows[idx, node.rule.feature])
        walk(node.left, idx[go_left])
        walk(node.right, idx[~go_left])

    walk(model.root, np.arange(rows.shape[0]))
    return out


def _node_to_obj(node: TreeNode):
    if isinstance(node, Leaf):
        return {"kind": "leaf", "class": int(node.class_index)}
    if isinstance(node.rule, NumericalSplit):
        return {"kind": "num", "feature": int(node.rule.feature),
                "threshold": float(node.rule.threshold),
                "left": _node_to_obj(node.left), "right": _node_to_obj(node.right)}
    return {"kind": "cat", "feature": int(node.rule.feature),
            "left_set": sorted(int(c) for c in node.rule.left_set),
            "left": _node_to_obj(node.left), "right": _node_to_obj(node.right)}


def _node_from_obj(obj) -> TreeNode:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ModelFormatError("node objects need a 'kind' field")
    kind = obj["kind"]
    if kind == "leaf":
        cls = obj.get("class")
        if not isinstance(cls, int) or isinstance(cls, bool) or cls < 0:
            raise ModelFormatError(f"leaf 'class' must be a non-negative int, got {cls!r}")
        return Leaf(cls)
    if kind not in ("num", "cat"):
        raise ModelFormatError(f"unknown node kind {kind!r}")
    feature = obj.get("feature")
    if not isinstance(feature, int) or isinstance(feature, bool) or feature < 0:
        raise ModelFormatError(f"node 'feature' must be a non-negative int, got {feature!r}")
    if "left" not in obj or "right" not in obj:
        raise ModelFormatError("internal nodes need 'left' and 'right' children")
    if kind == "num":
        threshold = obj.get("threshold")
        if not isinstance(threshold, (int, float)) or isinstance(threshold, bool):
            raise ModelFormatError(f"'threshold' must be a number, got {threshold!r}")
        rule: SplitRule = NumericalSplit(feature, float(threshold))
    else:
        left_set = obj.get("left_set")
        if (not isinstance(left_set, list) or not left_set
                or not all(isinstance(c, int) and not isinstance(c, bool) and c >= 0
                           for c in left_set)):
            raise ModelFormatError(f"'left_set' must be a non-empty list of ints, got {left_set!r}")
        rule = CategoricalSplit(feature, frozenset(left_set))
    return Internal(rule, _node_from_obj(obj["left"]), _node_from_obj(obj["right"]))


def serialize(model: TreeModel) -> bytes:
    """Stable JSON encoding (sorted keys, shortest-round-trip floats)."""
    obj = {
        "format_version": FORMAT_VERSION,
        "params": {
            "epsilon": float(model.params.epsilon),
            "max_depth": int(model.params.max_depth),
            "max_leaf_error": float(model.params.max_leaf_error),
            "seed": int(model.params.seed),
        },
        "schema_hash": model.schema_hash,
        "bin_edges": {str(j): list(e.edges) for j, e in sorted(model.bin_edges.items())},
        "root": _node_to_obj(model.root),
    }
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def deserialize(data: bytes) -> TreeModel:
    """Inverse of serialize. Raises ModelFormatError on version mismatch or
    malformed payloads. The budget ledger is not part of the wire format."""
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ModelFormatError("model payload must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {obj.get('format_version')!r}, "
                               f"expected {FORMAT_VERSION}")
    params_obj = obj.get("params")
    if not isinstance(params_obj, dict):
        raise ModelFormatError("model payload needs a 'params' object")
    try:
        params = ModelParams(epsilon=float(params_obj["epsilon"]),
                             max_depth=int(params_obj["max_depth"]),
                             max_leaf_error=float(params_obj["max_leaf_error"]),
                             seed=int(params_obj["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad 'params' object: {exc}") from exc
    schema_hash = obj.get("schema_hash")
    if not isinstance(schema_hash, str):
        raise ModelFormatError("'schema_hash' must be a string")
    edges_obj = obj.get("bin_edges")
    if not isinstance(edges_obj, dict):
        raise ModelFormatError("'bin_edges' must be an object")
    bin_edges: dict[int, BinEdges] = {}
    for key, value in edges_obj.items():
        try:
            bin_edges[int(key)] = BinEdges(tuple(float(v) for v in value))
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"bad bin_edges entry for feature {key!r}: {exc}") from exc
    if "root" not in obj:
        raise ModelFormatError("model payload needs a 'root' node")
    return TreeModel(_node_from_obj(obj["root"]), params, schema_hash, bin_edges)
