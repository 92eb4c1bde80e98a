"""Paired significance testing, FDR control, and bootstrap intervals.

Method comparisons produce one score per method per evaluation unit (a
seeded run); differences are tested with a two-sided sign-flip permutation
test and corrected across a metric family with the Benjamini-Yekutieli
step-up procedure, which stays valid under arbitrary dependence between
the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, ValidationError

DEFAULT_N_PERMUTATIONS = 10_000
EXACT_LIMIT = 20
_ENUMERATION_CHUNK = 1 << 14


@dataclass(frozen=True)
class PairedScores:
    """Aligned per-unit scores for two methods."""

    scores_a: np.ndarray
    scores_b: np.ndarray
    unit_ids: tuple | None = None

    def __post_init__(self):
        a = np.asarray(self.scores_a, dtype=np.float64)
        b = np.asarray(self.scores_b, dtype=np.float64)
        object.__setattr__(self, "scores_a", a)
        object.__setattr__(self, "scores_b", b)
        if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
            raise DimensionError("paired scores must be two equal-length vectors")
        if a.size < 1:
            raise DomainError("paired scores need at least one unit")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("paired scores must be finite")
        if self.unit_ids is not None:
            ids = tuple(self.unit_ids)
            object.__setattr__(self, "unit_ids", ids)
            if len(ids) != a.size:
                raise DimensionError("unit ids must align with the scores")

    @property
    def differences(self) -> np.ndarray:
        return self.scores_a - self.scores_b


def paired_permutation_test(
    scores: PairedScores,
    n_perm: int = DEFAULT_N_PERMUTATIONS,
    seed: int = 0,
    mode: str = "auto",
) -> float:
    """Two-sided sign-flip permutation test on the mean paired difference.

    Under the null the two methods are exchangeable within a unit, so each
    difference keeps its magnitude and flips sign with probability one
    half.  ``exact`` enumerates all 2^n sign patterns (n <= 20); ``sampled``
    draws ``n_perm`` random patterns and uses the add-one estimator
    ``p = (1 + #{|T*| >= |T|}) / (1 + n_perm)``, so the p-value is never
    exactly zero.  ``auto`` picks exact when feasible.

    Returns the p-value for the observed mean difference.
    """
    diffs = scores.differences
    n = diffs.size
    if mode == "auto":
        mode = "exact" if n <= EXACT_LIMIT else "sampled"
    if mode not in ("exact", "sampled"):
        raise ValidationError(f"unknown permutation mode {mode!r}")
    observed = abs(float(diffs.mean()))
    if mode == "exact":
        if n > EXACT_LIMIT:
            raise DomainError(
                f"exact enumeration supports at most {EXACT_LIMIT} units, got {n}"
            )
        total = 1 << n
        count = 0
        bits = np.arange(n)
        for start in range(0, total, _ENUMERATION_CHUNK):
            codes = np.arange(start, min(start + _ENUMERATION_CHUNK, total))
            signs = ((codes[:, None] >> bits) & 1) * 2.0 - 1.0
            stats = np.abs(signs @ diffs) / n
            count += int(np.sum(stats >= observed))
        return count / total
    if n_perm < 1:
        raise DomainError("n_perm must be positive")
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(n_perm, n)) * 2.0 - 1.0
    stats = np.abs(signs @ diffs) / n
    count = int(np.sum(stats >= observed))
    return (1 + count) / (1 + n_perm)


@dataclass(frozen=True)
class FdrDecision:
    """Outcome of a false-discovery-rate correction over one test family."""

    raw_p: np.ndarray
    adjusted_p: np.ndarray
    rejected: np.ndarray
    alpha: float


def by_fdr(p_values, alpha: float = 0.05) -> FdrDecision:
    """Benjamini-Yekutieli step-up correction for dependent tests.

    With m sorted p-values, the procedure rejects the largest k tests with
    ``p_(k) <= k * alpha / (m * c(m))`` where ``c(m)`` is the m-th harmonic
    number; the extra ``c(m)`` factor keeps the FDR bound valid whatever
    the dependence between tests.  Adjusted p-values are the step-up
    monotone transform clipped to 1, so a test is rejected exactly when its
    adjusted p-value is at most ``alpha``.
    """
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise DimensionError("p-values must be a nonempty vector")
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise DomainError("p-values must lie in [0, 1]")
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    m = p.size
    harmonic = float(np.sum(1.0 / np.arange(1, m + 1)))
    order = np.argsort(p, kind="stable")
    scaled = p[order] * (m * harmonic) / np.arange(1, m + 1)
    adjusted_sorted = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    rejected = adjusted <= alpha
    return FdrDecision(raw_p=p, adjusted_p=adjusted, rejected=rejected, alpha=alpha)


def bootstrap_mean_ci(
    values, n_boot: int = 1000, level: float = 95.0, seed: int = 0
):
    """Percentile bootstrap confidence interval for the mean.

    Resamples the values with replacement ``n_boot`` times using a
    generator seeded with ``seed`` (resample indices come from a single
    ``integers(0, n, size=(n_boot, n))`` draw, so results are reproducible)
    and returns the ``(100 - level) / 2`` and ``100 - (100 - level) / 2``
    percentiles of the resampled means.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise DomainError("bootstrap needs at least two values")
    if not np.all(np.isfinite(x)):
        raise ValidationError("bootstrap values must be finite")
    if n_boot < 1:
        raise DomainError("n_boot must be positive")
    if not 0.0 < level < 100.0:
        raise DomainError("level must be a percentage in (0, 100)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    means = x[idx].mean(axis=1)
    tail = (100.0 - level) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(low), float(high)
