"""Seedable differential-privacy primitives.

Every mechanism draws from an explicit :class:`RandomStream`, so outputs are a
pure function of (arguments, seed, call order). An infinite budget switches
each mechanism into its deterministic limit (identity for noise, lowest-index
argmax for selection), which lets tests compare against non-private
references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PrivacyBudget",
    "RandomStream",
    "UtilityVector",
    "laplace_noise",
    "two_sided_geometric_noise",
    "exponential_mechanism",
    "permute_and_flip",
]


@dataclass(frozen=True)
class PrivacyBudget:
    """Pure-epsilon privacy budget.

    epsilon must be strictly positive; ``math.inf`` is allowed and means
    "no noise" (a degenerate deterministic mode intended for tests).
    """

    epsilon: float

    def __post_init__(self) -> None:
        eps = self.epsilon
        if isinstance(eps, bool) or not isinstance(eps, (int, float)):
            raise ValueError(f"epsilon must be a positive real, got {eps!r}")
        if math.isnan(eps) or eps <= 0:
            raise ValueError(f"epsilon must be > 0 (or inf), got {eps!r}")
        object.__setattr__(self, "epsilon", float(eps))

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.epsilon)


def _epsilon_of(budget: PrivacyBudget | float) -> float:
    """Accept a PrivacyBudget or a bare float, returning a validated epsilon."""
    if isinstance(budget, PrivacyBudget):
        return budget.epsilon
    return PrivacyBudget(budget).epsilon


class RandomStream:
    """Deterministic pseudo-random source keyed by a 64-bit seed.

    Backed by numpy's PCG64: identical seed plus identical call sequence
    yields identical outputs. ``substream(*key)`` derives an independent
    stream from (seed, key...) so per-feature work can be decoupled from call
    order elsewhere. A stream must not be shared across concurrent callers.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise ValueError(f"seed must be an integer, got {seed!r}")
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform real draw(s) on [low, high)."""
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integer draw(s) on [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def substream(self, *key: int) -> "RandomStream":
        """Independent stream derived deterministically from (seed, key...)."""
        return RandomStream(self.seed, self._key + tuple(key))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RandomStream(seed={self.seed}, key={self._key})"


@dataclass(frozen=True)
class UtilityVector:
    """Candidate utility scores together with their global sensitivity."""

    utilities: tuple[float, ...]
    sensitivity: float = 1.0

    def __post_init__(self) -> None:
        utils = np.asarray(self.utilities, dtype=float)
        if utils.ndim != 1 or utils.size == 0:
            raise ValueError("utilities must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(utils)):
            raise ValueError("utilities must all be finite")
        sens = self.sensitivity
        if isinstance(sens, bool) or not isinstance(sens, (int, float, np.floating)):
            raise ValueError(f"sensitivity must be a positive real, got {sens!r}")
        if not math.isfinite(sens) or sens <= 0:
            raise ValueError(f"sensitivity must be positive and finite, got {sens!r}")
        object.__setattr__(self, "utilities", tuple(float(u) for u in utils))
        object.__setattr__(self, "sensitivity", float(sens))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.utilities, dtype=float)

    def __len__(self) -> int:
        return len(self.utilities)


def laplace_noise(value, sensitivity: float, budget: PrivacyBudget | float,
                  rng: RandomStream):
    """Add Laplace(sensitivity / epsilon) noise to a value.

    ``value`` may be a scalar or an ndarray; the return type matches. Each
    element is produced by inverse-CDF transform of a single uniform draw, so
    results are bit-reproducible from the stream with no rejection loops.
    At infinite budget the value is returned unchanged.
    """
    eps = _epsilon_of(budget)
    if isinstance(sensitivity, bool) or not isinstance(sensitivity, (int, float, np.floating)):
        raise ValueError(f"sensitivity must be a positive real, got {sensitivity!r}")
    if not math.isfinite(sensitivity) or sensitivity <= 0:
        raise ValueError(f"sensitivity must be positive and finite, got {sensitivity!r}")
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("value must be finite")
    scalar = np.ndim(value) == 0
    if math.isinf(eps):
        return float(arr) if scalar else arr.copy()
    scale = sensitivity / eps
    centered = rng.uniform(size=arr.shape) - 0.5
    # log argument can only reach 0 if the draw hits 0.0 exactly; clamp keeps
    # the output finite without measurably distorting the distribution.
    log_arg = np.maximum(1.0 - 2.0 * np.abs(centered), np.finfo(float).tiny)
    noise = -scale * np.sign(centered) * np.log(log_arg)
    out = arr + noise
    return float(out) if scalar else out


def two_sided_geometric_noise(count, budget: PrivacyBudget | float,
                              rng: RandomStream):
    """Add two-sided geometric noise to an integer count (sensitivity 1).

    The noise pmf is Pr[delta] = ((1 - a) / (1 + a)) * a^|delta| with
    a = exp(-epsilon). ``count`` may be a scalar int or an integer ndarray.
    Each element consumes exactly two uniforms: a zero/sign draw and an
    inverse-CDF draw for the one-sided geometric magnitude on {1, 2, ...}.
    At infinite budget the count is returned unchanged.
    """
    eps = _epsilon_of(budget)
    arr = np.asarray(count)
    if arr.dtype.kind not in "iu":
        raise ValueError(f"count must be integer-valued, got dtype {arr.dtype}")
    scalar = np.ndim(count) == 0
    if math.isinf(eps):
        return int(arr) if scalar else arr.astype(np.int64, copy=True)
    alpha = math.exp(-eps)
    p_zero = (1.0 - alpha) / (1.0 + alpha)
    u_sel = rng.uniform(size=arr.shape)
    u_mag = rng.uniform(size=arr.shape)
    if alpha > 0.0:
        mag = np.ceil(np.log1p(-u_mag) / math.log(alpha)).astype(np.int64)
        mag = np.maximum(mag, 1)
    else:
        # exp(-eps) underflowed: all mass sits on delta = 0 anyway.
        mag = np.ones(arr.shape, dtype=np.int64)
    sign = np.where(u_sel < p_zero, 0,
                    np.where(u_sel < p_zero + (1.0 - p_zero) / 2.0, -1, 1))
    out = arr.astype(np.int64) + sign * mag
    return int(out) if scalar else out


def _selection_args(candidates: UtilityVector, budget) -> tuple[np.ndarray, float]:
    if not isinstance(candidates, UtilityVector):
        raise ValueError("candidates must be a UtilityVector")
    return candidates.as_array(), _epsilon_of(budget)


def exponential_mechanism(candidates: UtilityVector, budget: PrivacyBudget | float,
                          rng: RandomStream, size: int | None = None):
    """Select an index with probability proportional to exp(eps*u/(2*sens)).

    Uses a uniform base measure. Returns a single int, or an int64 array of
    independent draws when ``size`` is given. At infinite budget the
    lowest-index argmax is returned and no randomness is consumed.
    """
    utils, eps = _selection_args(candidates, budget)
    if math.isinf(eps):
        idx = int(np.argmax(utils))
        return idx if size is None else np.full(size, idx, dtype=np.int64)
    weights = np.exp(eps * (utils - utils.max()) / (2.0 * candidates.sensitivity))
    cdf = np.cumsum(weights)
    picks = np.searchsorted(cdf, rng.uniform(size=size) * cdf[-1], side="right")
    picks = np.minimum(picks, len(utils) - 1)
    return int(picks) if size is None else picks.astype(np.int64)


def permute_and_flip(candidates: UtilityVector, budget: PrivacyBudget | float,
                     rng: RandomStream, size: int | None = None):
    """Permute-and-flip selection.

    Shuffles the candidates uniformly and visits them in order, accepting
    candidate r with probability exp(eps * (u_r - u_max) / (2 * sens)). The
    maximal candidate is accepted with probability 1, so the walk always
    terminates. Expected utility is never worse than the exponential
    mechanism's.

    The vectorized ``size`` path uses the equivalent formulation "flip one
    coin per candidate, pick uniformly among the heads": the first head along
    a uniformly shuffled visit order is uniform over the heads set, which is
    nonempty because the maximal candidate always lands heads.

    At infinite budget the lowest-index argmax is returned and no randomness
    is consumed.
    """
    utils, eps = _selection_args(candidates, budget)
    if math.isinf(eps):
        idx = int(np.argmax(utils))
        return idx if size is None else np.full(size, idx, dtype=np.int64)
    heads_p = np.exp(eps * (utils - utils.max()) / (2.0 * candidates.sensitivity))
    k = len(utils)
    if size is None:
        order = rng.permutation(k)
        for r in order:
            if rng.uniform() < heads_p[r]:
                return int(r)
        return int(order[-1])  # unreachable: the max candidate has p = 1
    coins = rng.uniform(size=(size, k)) < heads_p[None, :]
    n_heads = coins.sum(axis=1)
    target = (rng.uniform(size=size) * n_heads).astype(np.int64) + 1
    cumulative = np.cumsum(coins, axis=1)
    return np.argmax(cumulative == target[:, None], axis=1).astype(np.int64)
