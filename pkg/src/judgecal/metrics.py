"""Calibration, proper-scoring, agreement, ranking, and coverage metrics.

All metrics consume a :class:`PredictionSet`: a row-stochastic matrix of
predictive probabilities with optional integer labels.  Confidence always
means the probability of the argmax class.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ArgumentError, DimensionError, DomainError, ValidationError

LOG_FLOOR = 1e-12
DEFAULT_N_BINS = 15
DEFAULT_POSITIVE_CLASS = 0


@dataclass
class PredictionSet:
    """Predictive probabilities for M samples over C classes."""

    probs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        self.probs = probs
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise DimensionError("probs must be a (M, C) array with C >= 2")
        if not np.all(np.isfinite(probs)):
            raise ValidationError("probabilities must be finite")
        if probs.size and probs.min() < 0.0:
            raise ValidationError("probabilities must be nonnegative")
        if probs.shape[0] and not np.allclose(
            probs.sum(axis=1), 1.0, rtol=0.0, atol=1e-9
        ):
            raise ValidationError("each probability row must sum to 1 within 1e-9")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
                raise DimensionError("labels must align with probability rows")
            if labels.size and not (
                np.issubdtype(labels.dtype, np.integer)
                and labels.min() >= 0
                and labels.max() < probs.shape[1]
            ):
                raise ValidationError("labels must be integers in [0, C)")
            self.labels = labels.astype(np.int64)
        probs.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return int(self.probs.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.probs.shape[1])

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predicted(self) -> np.ndarray:
        """Argmax class per row; ties resolve to the lowest index."""
        return self.probs.argmax(axis=1)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ArgumentError("this metric needs labels")
        return self.labels


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin confidence/accuracy summary over equal-width bins."""

    edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n_bins(self) -> int:
        return int(self.counts.shape[0])

    def rows(self) -> list:
        """Bin table as dict rows, convenient for CSV export."""
        return [
            {
                "bin_low": float(self.edges[b]),
                "bin_high": float(self.edges[b + 1]),
                "count": int(self.counts[b]),
                "mean_confidence": float(self.mean_confidence[b]),
                "accuracy": float(self.accuracy[b]),
            }
            for b in range(self.n_bins)
        ]


def _nonempty(preds: PredictionSet) -> None:
    if preds.n_samples == 0:
        raise DomainError("metric is undefined on an empty prediction set")


def calibration_errors(preds: PredictionSet, n_bins: int = DEFAULT_N_BINS):
    """Expected and maximum calibration error over equal-width bins.

    Confidences are binned on [0, 1] into ``n_bins`` equal-width bins (the
    top bin includes 1.0).  The expected error is the count-weighted mean
    of |accuracy - confidence| per bin; the maximum error is the largest
    such gap over nonempty bins.

    Returns
    -------
    (float, float, ReliabilityBins)
        Expected calibration error, maximum calibration error, bin table.
    """
    _nonempty(preds)
    labels = preds.require_labels()
    if n_bins < 1:
        raise DomainError("n_bins must be positive")
    conf = preds.confidences
    correct = (preds.predicted == labels).astype(np.float64)
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    filled = counts > 0
    mean_conf = np.zeros(n_bins)
    accuracy = np.zeros(n_bins)
    mean_conf[filled] = conf_sum[filled] / counts[filled]
    accuracy[filled] = acc_sum[filled] / counts[filled]
    gaps = np.abs(accuracy - mean_conf)
    ece = float(np.sum(counts[filled] / preds.n_samples * gaps[filled]))
    mce = float(gaps[filled].max())
    bins = ReliabilityBins(
        edges=np.linspace(0.0, 1.0, n_bins + 1),
        counts=counts.astype(np.int64),
        mean_confidence=mean_conf,
        accuracy=accuracy,
    )
    return ece, mce, bins


def proper_scores(preds: PredictionSet):
    """Negative log-likelihood and multiclass Brier score.

    NLL floors the true-class probability at 1e-12 before the log.  The
    Brier score sums the squared gap to the one-hot label over classes and
    averages over samples, so a binary coin-flip prediction scores 0.5.

    Returns
    -------
    (float, float)
        Mean negative log-likelihood, mean Brier score.
    """
    _nonempty(preds)
    labels = preds.require_labels()
    p_true = preds.probs[np.arange(preds.n_samples), labels]
    nll = float(np.mean(-np.log(np.maximum(p_true, LOG_FLOOR))))
    onehot = np.zeros_like(preds.probs)
    onehot[np.arange(preds.n_samples), labels] = 1.0
    brier = float(np.mean(np.sum((preds.probs - onehot) ** 2, axis=1)))
    return nll, brier


@dataclass(frozen=True)
class ClassificationScores:
    accuracy: float
    f1: float
    kappa: float
    kappa_degenerate: bool = False


def classification_scores(
    preds: PredictionSet, positive_class: int = DEFAULT_POSITIVE_CLASS
) -> ClassificationScores:
    """Accuracy, F1, and chance-corrected agreement of the argmax decision.

    F1 is the binary score of ``positive_class`` for two-class problems
    (macro-averaged one-vs-rest otherwise).  Agreement is corrected by the
    marginal-product expected agreement; when that expectation is exactly 1
    the correction is undefined, so the score is reported as 0 and flagged.
    """
    _nonempty(preds)
    labels = preds.require_labels()
    if not 0 <= positive_class < preds.n_classes:
        raise DomainError(
            f"positive class {positive_class} outside [0, {preds.n_classes})"
        )
    predicted = preds.predicted
    accuracy = float(np.mean(predicted == labels))
    if preds.n_classes == 2:
        f1 = _binary_f1(labels, predicted, positive_class)
    else:
        f1 = float(
            np.mean(
                [_binary_f1(labels, predicted, c) for c in range(preds.n_classes)]
            )
        )
    marg_true = np.bincount(labels, minlength=preds.n_classes) / preds.n_samples
    marg_pred = np.bincount(predicted, minlength=preds.n_classes) / preds.n_samples
    expected = float(marg_true @ marg_pred)
    if expected >= 1.0:
        warnings.warn(
            "expected agreement is 1; chance-corrected agreement is undefined "
            "and reported as 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return ClassificationScores(accuracy, f1, 0.0, kappa_degenerate=True)
    kappa = float((accuracy - expected) / (1.0 - expected))
    return ClassificationScores(accuracy, f1, kappa)


def _binary_f1(labels: np.ndarray, predicted: np.ndarray, positive: int) -> float:
    tp = float(np.sum((predicted == positive) & (labels == positive)))
    fp = float(np.sum((predicted == positive) & (labels != positive)))
    fn = float(np.sum((predicted != positive) & (labels == positive)))
    denom = 2.0 * tp + fp + fn
    if denom == 0.0:
        return 0.0
    return 2.0 * tp / denom


def ranking_scores(
    preds: PredictionSet, positive_class: int = DEFAULT_POSITIVE_CLASS
):
    """Threshold-free ranking quality of the positive-class score.

    The area under the ROC curve is computed as the tie-corrected rank
    statistic (midranks), which equals the probability that a random
    positive outscores a random negative with ties counting half.  The
    area under the precision-recall curve is the step-wise integral of
    precision over recall across descending distinct score thresholds.

    Returns
    -------
    (float, float)
        ROC area, precision-recall area.
    """
    _nonempty(preds)
    labels = preds.require_labels()
    if not 0 <= positive_class < preds.n_classes:
        raise DomainError(
            f"positive class {positive_class} outside [0, {preds.n_classes})"
        )
    scores = preds.probs[:, positive_class]
    positive = labels == positive_class
    n_pos = int(positive.sum())
    n_neg = preds.n_samples - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ranking metrics need both classes present")
    ranks = rankdata(scores, method="average")
    roc_auc = float(
        (ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positive[order].astype(np.float64)
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_pos)
    predicted_pos = np.arange(1, preds.n_samples + 1, dtype=np.float64)
    # Evaluate precision/recall only where the threshold changes (last
    # index of each tied block), stepping over equal-score groups at once.
    block_end = np.flatnonzero(
        np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    )
    precision = tp[block_end] / predicted_pos[block_end]
    recall = tp[block_end] / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    pr_auc = float(np.sum((recall - recall_prev) * precision))
    return roc_auc, pr_auc


def error_coverage_curve(preds: PredictionSet, n_points: int = 20):
    """Selective risk at evenly spaced coverage levels.

    Samples are sorted by confidence descending (ties keep input order);
    at coverage c the most confident ``ceil(c * M)`` samples are kept and
    their argmax error rate reported.  Coverage levels are ``i/n_points``
    for i = 1..n_points, with full coverage always included.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray)
        Coverage levels and the selective error at each level.
    """
    _nonempty(preds)
    labels = preds.require_labels()
    if n_points < 1:
        raise DomainError("n_points must be positive")
    order = np.argsort(-preds.confidences, kind="stable")
    wrong = (preds.predicted != labels).astype(np.float64)[order]
    cum_err = np.cumsum(wrong)
    coverages = np.unique(np.append(np.arange(1, n_points + 1) / n_points, 1.0))
    keep = np.ceil(coverages * preds.n_samples).astype(np.int64)
    keep = np.clip(keep, 1, preds.n_samples)
    errors = cum_err[keep - 1] / keep
    return coverages, errors


def mean_confidence(preds: PredictionSet) -> float:
    """Average argmax-class probability; needs no labels."""
    _nonempty(preds)
    return float(np.mean(preds.confidences))
