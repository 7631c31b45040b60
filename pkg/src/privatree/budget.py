"""Privacy-budget sizing and allocation for the tree trainer.

The leaf budget is sized from a worst-case bound on the expected labeling
error of permute-and-flip, then the remainder is spread over quantile and
node operations so that the whole training run composes to exactly the total
budget (sequentially within a root-to-leaf path, in parallel across disjoint
data subsets).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

__all__ = [
    "TrainerParams",
    "BudgetPlan",
    "BudgetLedger",
    "pf_worst_case_error_term",
    "required_leaf_budget",
    "allocate_budget",
]

_GRID_POINTS = 10_000
_GRID_LO = 1e-6
_GRID_HI = 1.0 - 1e-6
_VALUE_TOL = 1e-8


@dataclass(frozen=True)
class TrainerParams:
    """User-facing training parameters.

    epsilon_total may be ``math.inf`` (deterministic test mode).
    max_leaf_error is the tolerated extra expected error from labeling
    leaves; 0.01 means at most one extra percentage point.
    """

    epsilon_total: float
    max_depth: int
    n_samples: int
    n_classes: int
    max_leaf_error: float = 0.01

    def __post_init__(self) -> None:
        eps = self.epsilon_total
        if isinstance(eps, bool) or not isinstance(eps, (int, float)):
            raise ValueError(f"epsilon_total must be a positive real, got {eps!r}")
        if math.isnan(eps) or eps <= 0:
            raise ValueError(f"epsilon_total must be > 0 (or inf), got {eps!r}")
        if not isinstance(self.max_depth, int) or isinstance(self.max_depth, bool) or self.max_depth < 0:
            raise ValueError(f"max_depth must be a non-negative integer, got {self.max_depth!r}")
        if not isinstance(self.n_samples, int) or isinstance(self.n_samples, bool) or self.n_samples < 1:
            raise ValueError(f"n_samples must be a positive integer, got {self.n_samples!r}")
        if not isinstance(self.n_classes, int) or isinstance(self.n_classes, bool) or self.n_classes < 2:
            raise ValueError(f"n_classes must be an integer >= 2, got {self.n_classes!r}")
        err = self.max_leaf_error
        if isinstance(err, bool) or not isinstance(err, (int, float)) or not (0.0 < err <= 1.0):
            raise ValueError(f"max_leaf_error must be in (0, 1], got {err!r}")
        object.__setattr__(self, "epsilon_total", float(eps))
        object.__setattr__(self, "max_leaf_error", float(err))


@dataclass(frozen=True)
class BudgetPlan:
    """Budget split over the trainer's private operations.

    Identities (relative tolerance 1e-9, trivially true at infinite budget):
        eps_quantiles + max_depth * eps_node_num + eps_leaf == epsilon_total
        max_depth * eps_node_cat + eps_leaf == epsilon_total
    For max_depth >= 1, eps_leaf <= epsilon_total / 2; at max_depth == 0 the
    whole budget goes to the single leaf (there is nothing else to spend on).
    p_star is the maximizer behind the leaf-budget bound, kept for
    diagnostics.
    """

    eps_leaf: float
    eps_node_num: float
    eps_node_cat: float
    eps_quantiles: float
    p_star: float

    def __post_init__(self) -> None:
        for name in ("eps_leaf", "eps_node_num", "eps_node_cat", "eps_quantiles"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or math.isnan(v) or v < 0:
                raise ValueError(f"{name} must be a non-negative real, got {v!r}")
            object.__setattr__(self, name, float(v))
        if not (0.0 < self.p_star < 1.0):
            raise ValueError(f"p_star must lie in (0, 1), got {self.p_star!r}")


def _pf_error_objective(p: float, n_classes: int) -> float:
    # 2*log(1/p) * (1 - (1 - (1-p)^K) / (K*p)), the per-leaf worst-case
    # expected-error coefficient before the 2^d / (n * E_max) scaling.
    return 2.0 * math.log(1.0 / p) * (1.0 - (1.0 - (1.0 - p) ** n_classes) / (n_classes * p))


@functools.lru_cache(maxsize=None)
def pf_worst_case_error_term(n_classes: int) -> tuple[float, float]:
    """Maximize the permute-and-flip worst-case error coefficient over p.

    Returns (value, p_star). Solved numerically: a dense grid over
    (1e-6, 1 - 1e-6) followed by golden-section refinement; the objective is
    smooth and unimodal for the class counts we care about, and the refinement
    drives the value error far below 1e-8.
    """
    if not isinstance(n_classes, int) or isinstance(n_classes, bool) or n_classes < 2:
        raise ValueError(f"n_classes must be an integer >= 2, got {n_classes!r}")
    step = (_GRID_HI - _GRID_LO) / (_GRID_POINTS - 1)
    best_i, best_v = 0, -math.inf
    for i in range(_GRID_POINTS):
        v = _pf_error_objective(_GRID_LO + i * step, n_classes)
        if v > best_v:
            best_i, best_v = i, v
    lo = max(_GRID_LO, _GRID_LO + (best_i - 1) * step)
    hi = min(_GRID_HI, _GRID_LO + (best_i + 1) * step)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _pf_error_objective(c, n_classes)
    fd = _pf_error_objective(d, n_classes)
    while (b - a) > 1e-13:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _pf_error_objective(c, n_classes)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _pf_error_objective(d, n_classes)
    p_star = (a + b) / 2.0
    return _pf_error_objective(p_star, n_classes), p_star


def required_leaf_budget(params: TrainerParams) -> float:
    """Leaf budget that caps the expected labeling error at max_leaf_error.

    Equals 2^depth * worst_case_term / (n_samples * max_leaf_error): the
    per-leaf coefficient scaled by the leaf count and normalized to a
    fraction of the dataset.
    """
    value, _ = pf_worst_case_error_term(params.n_classes)
    return (2.0 ** params.max_depth) * value / (params.n_samples * params.max_leaf_error)


def allocate_budget(params: TrainerParams) -> BudgetPlan:
    """Split the total budget over leaf labeling, node search and quantiles.

    eps_leaf = min(epsilon/2, required_leaf_budget); the remainder is spread
    as eps_node_num = eps_quantiles = rest/(1+d) and eps_node_cat = rest/d.
    With d == 0 there are no splits and no quantiles, so the leaf absorbs the
    full budget. With an infinite budget every component is infinite (fully
    deterministic training).
    """
    _, p_star = pf_worst_case_error_term(params.n_classes)
    eps = params.epsilon_total
    d = params.max_depth
    if math.isinf(eps):
        return BudgetPlan(math.inf, math.inf, math.inf, math.inf, p_star)
    if d == 0:
        return BudgetPlan(eps_leaf=eps, eps_node_num=0.0, eps_node_cat=0.0,
                          eps_quantiles=0.0, p_star=p_star)
    eps_leaf = min(eps / 2.0, required_leaf_budget(params))
    rest = eps - eps_leaf
    per_level = rest / (1 + d)
    return BudgetPlan(eps_leaf=eps_leaf, eps_node_num=per_level,
                      eps_node_cat=rest / d, eps_quantiles=per_level,
                      p_star=p_star)


@dataclass(frozen=True)
class BudgetLedger:
    """Account of what a finished training run was entitled to and spent.

    Spend is the worst case over root-to-leaf paths: a record traverses at
    most depth_used internal nodes, pays the quantile cost once (numerical
    columns only) and the leaf cost once. Numerical and categorical columns
    are disjoint, so the overall spend is the max of the two routes.
    """

    epsilon_total: float
    eps_leaf: float
    eps_node_num: float
    eps_node_cat: float
    eps_quantiles: float
    max_depth: int
    depth_used: int

    @classmethod
    def from_plan(cls, plan: BudgetPlan, params: TrainerParams,
                  depth_used: int) -> "BudgetLedger":
        return cls(epsilon_total=params.epsilon_total, eps_leaf=plan.eps_leaf,
                   eps_node_num=plan.eps_node_num, eps_node_cat=plan.eps_node_cat,
                   eps_quantiles=plan.eps_quantiles, max_depth=params.max_depth,
                   depth_used=depth_used)

    @classmethod
    def for_random_baseline(cls, epsilon_total: float, max_depth: int,
                            depth_used: int) -> "BudgetLedger":
        # Random structure is data-independent: the whole budget labels leaves.
        return cls(epsilon_total=epsilon_total, eps_leaf=epsilon_total,
                   eps_node_num=0.0, eps_node_cat=0.0, eps_quantiles=0.0,
                   max_depth=max_depth, depth_used=depth_used)

    @property
    def spent_numerical_route(self) -> float:
        return self.eps_quantiles + self.depth_used * self.eps_node_num + self.eps_leaf

    @property
    def spent_categorical_route(self) -> float:
        return self.depth_used * self.eps_node_cat + self.eps_leaf

    @property
    def total_spent(self) -> float:
        return max(self.spent_numerical_route, self.spent_categorical_route)

    def to_dict(self) -> dict:
        return {
            "epsilon_total": self.epsilon_total,
            "allocation": {
                "eps_leaf": self.eps_leaf,
                "eps_node_num": self.eps_node_num,
                "eps_node_cat": self.eps_node_cat,
                "eps_quantiles": self.eps_quantiles,
            },
            "max_depth": self.max_depth,
            "depth_used": self.depth_used,
            "spent": {
                "numerical_route": self.spent_numerical_route,
                "categorical_route": self.spent_categorical_route,
                "total": self.total_spent,
            },
        }
