"""Prompt-ensemble weight fitting and mixture prediction.

The central objective scores a weight row per image cluster by the cluster
weighted validation log-likelihood of each prompt, minus an entropy penalty
weighted by the cluster's validation mass:

    sum_j sum_z p(z|x_j) [ sum_a w_{za} loglik(j, a) - sum_a w_{za} log w_{za} ]

Maximizing over rows of the simplex has the closed form
``w_{za} proportional to exp(L_{za} / M_z)`` with
``L_{za} = sum_j p(z|x_j) loglik(j, a)`` and ``M_z = sum_j p(z|x_j)``; a
group with no validation mass keeps uniform weights.  The single-cluster
fit is exactly the K=1 case, so its solution is the softmax of per-prompt
mean log-likelihood.  Fitting runs a quasi-Newton optimizer over
unconstrained per-row logits and reports the gap to the closed form as a
cross-check.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, xlogy

from .clustering import ClusterModel
from .errors import (
    ArgumentError,
    CapacityError,
    DimensionError,
    DomainError,
    FormatError,
    IntegrityError,
    ValidationError,
)
from .ingest import DatasetBundle

LOG_FLOOR = 1e-12
WEIGHT_KINDS = ("standard", "best", "average", "bpe", "mmb")
BASELINE_KINDS = ("standard", "best", "average")

# Quasi-Newton settings for the logit optimizer.
MAX_ITERATIONS = 100
HISTORY_SIZE = 50


@dataclass(frozen=True)
class LogLikTensor:
    """Validation log-likelihood of the true label, per sample and prompt.

    ``values`` has shape (M, N): rows follow ``sample_ids``, columns follow
    ``prompt_ids``.  Entries are log-probabilities, so finite and <= 0.
    """

    values: np.ndarray
    sample_ids: tuple
    prompt_ids: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "prompt_ids", tuple(self.prompt_ids))
        if values.ndim != 2:
            raise DimensionError("log-likelihood values must be a 2-d array")
        if values.shape != (len(self.sample_ids), len(self.prompt_ids)):
            raise DimensionError(
                f"log-likelihood shape {values.shape} disagrees with "
                f"{len(self.sample_ids)} samples x {len(self.prompt_ids)} prompts"
            )
        if len(self.prompt_ids) < 1:
            raise DimensionError("need at least one prompt column")
        if not np.all(np.isfinite(values)):
            raise ValidationError("log-likelihood entries must be finite")
        if values.size and values.max() > 0.0:
            raise ValidationError("log-likelihood entries must be <= 0")
        values.setflags(write=False)

    @classmethod
    def from_array(cls, values) -> "LogLikTensor":
        """Wrap a raw (M, N) array, synthesizing placeholder ids."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError("log-likelihood values must be a 2-d array")
        m, n = values.shape
        return cls(
            values=values,
            sample_ids=tuple(f"s{i}" for i in range(m)),
            prompt_ids=tuple(f"p{i}" for i in range(n)),
        )

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_prompts(self) -> int:
        return int(self.values.shape[1])


def build_loglik_tensor(
    bundle: DatasetBundle, split: str = "validation", prompt_ids=None
) -> LogLikTensor:
    """Assemble the (M, N) true-label log-likelihood matrix for one split.

    Rows are the split's samples in sorted-id order, columns follow the
    bundle's prompt order, or ``prompt_ids`` when a subset is given.  A
    true-class probability of exactly zero is clamped to ``log(1e-12)`` so
    every entry stays finite.
    """
    if prompt_ids is None:
        prompt_ids = bundle.prompt_ids
    else:
        prompt_ids = tuple(prompt_ids)
        unknown = [p for p in prompt_ids if p not in bundle.prompt_ids]
        if unknown:
            raise IntegrityError(f"unknown prompt ids {unknown!r}")
    sample_ids = bundle.samples(split)
    rows = np.empty((len(sample_ids), len(prompt_ids)))
    for i, sample_id in enumerate(sample_ids):
        label = bundle.label_of(sample_id)
        if label is None:
            raise IntegrityError(f"{split} sample {sample_id!r} has no label")
        per_prompt = bundle.records.get(sample_id, {})
        for a, prompt_id in enumerate(prompt_ids):
            record = per_prompt.get(prompt_id)
            if record is None:
                raise IntegrityError(
                    f"{split} sample {sample_id!r} is missing a record for "
                    f"prompt {prompt_id!r}"
                )
            p_true = record.probs()[label]
            rows[i, a] = np.log(max(p_true, LOG_FLOOR))
    return LogLikTensor(
        values=rows, sample_ids=tuple(sample_ids), prompt_ids=prompt_ids
    )


@dataclass(frozen=True)
class FitReport:
    """Optimizer diagnostics for one weight fit."""

    final_objective: float
    iterations: int
    converged: bool
    closed_form_gap: float


@dataclass
class EnsembleWeights:
    """A (K, N) row-stochastic weight matrix over prompts.

    Non-mixture kinds always have a single row.  ``cluster_model`` supplies
    test-time group membership and is required to predict with ``mmb``
    weights; ``report`` carries fit diagnostics and is not serialized.
    """

    kind: str
    weights: np.ndarray
    prompt_ids: tuple
    cluster_model: ClusterModel | None = None
    report: FitReport | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValidationError(f"unknown ensemble kind {self.kind!r}")
        weights = np.asarray(self.weights, dtype=np.float64)
        self.weights = weights
        self.prompt_ids = tuple(self.prompt_ids)
        if weights.ndim != 2:
            raise DimensionError("weights must be a (K, N) array")
        if weights.shape[1] != len(self.prompt_ids):
            raise DimensionError(
                f"{weights.shape[1]} weight columns for {len(self.prompt_ids)} prompts"
            )
        if self.kind != "mmb" and weights.shape[0] != 1:
            raise DimensionError(f"kind {self.kind!r} requires a single weight row")
        if not np.all(np.isfinite(weights)):
            raise ValidationError("weights must be finite")
        if weights.min() < 0.0:
            raise ValidationError("weights must be nonnegative")
        if not np.allclose(weights.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise ValidationError("each weight row must sum to 1 within 1e-9")
        weights.setflags(write=False)

    @property
    def n_groups(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_prompts(self) -> int:
        return int(self.weights.shape[1])

    def save(self, path) -> None:
        """Write the weights as a JSON document (exact float round-trip)."""
        obj = {
            "kind": "ensemble_weights",
            "method": self.kind,
            "n_groups": self.n_groups,
            "n_prompts": self.n_prompts,
            "prompt_ids": list(self.prompt_ids),
            "weights": [[float(v) for v in row] for row in self.weights],
            "cluster_model": None
            if self.cluster_model is None
            else {
                "temperature": self.cluster_model.temperature,
                "centroids": [
                    [float(v) for v in row] for row in self.cluster_model.centroids
                ],
            },
        }
        tmp = os.fspath(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.fspath(path))

    @classmethod
    def load(cls, path) -> "EnsembleWeights":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError:
                raise FormatError(f"{path}: not a valid weights file")
        if obj.get("kind") != "ensemble_weights":
            raise FormatError(f"{path}: not an ensemble weights file")
        cluster_model = None
        if obj.get("cluster_model") is not None:
            cluster_model = ClusterModel(
                centroids=np.asarray(obj["cluster_model"]["centroids"]),
                temperature=float(obj["cluster_model"]["temperature"]),
            )
        return cls(
            kind=obj["method"],
            weights=np.asarray(obj["weights"], dtype=np.float64),
            prompt_ids=tuple(obj["prompt_ids"]),
            cluster_model=cluster_model,
        )


def _as_loglik_values(loglik) -> np.ndarray:
    if isinstance(loglik, LogLikTensor):
        return loglik.values
    values = np.asarray(loglik, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError("log-likelihood values must be a 2-d array")
    return values


def _check_assignments(assignments, n_samples: int) -> np.ndarray:
    a = np.asarray(assignments, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("assignments must be a 2-d array")
    if a.shape[0] != n_samples:
        raise DimensionError(
            f"assignments have {a.shape[0]} rows for {n_samples} samples"
        )
    if not np.all(np.isfinite(a)):
        raise DomainError("assignments must be finite")
    if a.size and a.min() < 0.0:
        raise ValidationError("assignment probabilities must be nonnegative")
    if a.shape[0] and not np.allclose(a.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise ValidationError("each assignment row must sum to 1 within 1e-9")
    return a


def objective_and_gradient(logits, loglik, assignments):
    """Evaluate the fitting objective and its exact logit gradient.

    ``logits`` is (K, N); each row is mapped through a softmax to weights,
    which makes the objective invariant to shifting a whole logit row by a
    constant.  Returns ``(objective, gradient)`` where the gradient has the
    shape of ``logits``.
    """
    theta = np.asarray(logits, dtype=np.float64)
    values = _as_loglik_values(loglik)
    if theta.ndim != 2:
        raise DimensionError("logits must be a (K, N) array")
    if not np.all(np.isfinite(theta)):
        raise DomainError("logits must be finite")
    if not np.all(np.isfinite(values)):
        raise DomainError("log-likelihood entries must be finite")
    if theta.shape[1] != values.shape[1]:
        raise DimensionError(
            f"logits cover {theta.shape[1]} prompts, log-likelihoods cover "
            f"{values.shape[1]}"
        )
    a = _check_assignments(assignments, values.shape[0])
    if a.shape[1] != theta.shape[0]:
        raise DimensionError(
            f"assignments cover {a.shape[1]} groups, logits cover {theta.shape[0]}"
        )
    return _objective_and_gradient_raw(theta, values, a)


def _objective_and_gradient_raw(theta, values, assignments):
    log_w = theta - logsumexp(theta, axis=1, keepdims=True)
    w = np.exp(log_w)
    group_loglik = assignments.T @ values  # (K, N)
    group_mass = assignments.sum(axis=0)  # (K,)
    objective = float(
        np.sum(w * group_loglik) - np.sum(group_mass * np.sum(w * log_w, axis=1))
    )
    # dF/dw, then the softmax chain rule per row.
    g_w = group_loglik - group_mass[:, None] * (log_w + 1.0)
    gradient = w * (g_w - np.sum(w * g_w, axis=1, keepdims=True))
    return objective, gradient


def closed_form_weights(loglik, assignments) -> np.ndarray:
    """Analytic maximizer of the fitting objective, one simplex row per group.

    Row z is ``softmax(L_z / M_z)`` where ``L_z`` is the assignment-weighted
    per-prompt log-likelihood total and ``M_z`` the assignment mass; a row
    with zero mass is exactly uniform (the objective does not constrain it,
    and the entropy term alone prefers uniform).
    """
    values = _as_loglik_values(loglik)
    a = _check_assignments(assignments, values.shape[0])
    group_loglik = a.T @ values
    group_mass = a.sum(axis=0)
    n = values.shape[1]
    out = np.full(group_loglik.shape, 1.0 / n)
    filled = group_mass > 0.0
    if np.any(filled):
        scaled = group_loglik[filled] / group_mass[filled, None]
        scaled = scaled - scaled.max(axis=1, keepdims=True)
        expd = np.exp(scaled)
        out[filled] = expd / expd.sum(axis=1, keepdims=True)
    return out


def _maximize(values: np.ndarray, assignments: np.ndarray):
    """Run the logit optimizer and cross-check against the closed form."""
    m, n = values.shape
    k = assignments.shape[1]
    closed = closed_form_weights(values, assignments)
    group_mass = assignments.sum(axis=0)
    if m == 0 or not np.any(group_mass > 0.0):
        weights = np.full((k, n), 1.0 / n)
        return weights, FitReport(
            final_objective=0.0, iterations=0, converged=True, closed_form_gap=0.0
        )

    def negated(x):
        obj, grad = _objective_and_gradient_raw(x.reshape(k, n), values, assignments)
        return -obj, -grad.ravel()

    result = optimize.minimize(
        negated,
        np.zeros(k * n),
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": MAX_ITERATIONS,
            "maxcor": HISTORY_SIZE,
            "ftol": 1e-16,
            "gtol": 1e-12,
        },
    )
    theta = result.x.reshape(k, n)
    log_w = theta - logsumexp(theta, axis=1, keepdims=True)
    weights = np.exp(log_w)
    weights /= weights.sum(axis=1, keepdims=True)
    # Groups without validation mass are unconstrained; pin them to the
    # defined solution rather than whatever the optimizer left behind.
    weights[group_mass == 0.0] = 1.0 / n
    gap = float(np.max(np.abs(weights - closed)))
    # The analytic solution is available, so convergence is judged against
    # it directly; the optimizer's own status flag trips on line searches
    # that stall at machine precision long after the fit is done.
    report = FitReport(
        final_objective=float(-result.fun),
        iterations=int(result.nit),
        converged=gap <= 1e-6,
        closed_form_gap=gap,
    )
    return weights, report


def fit_bpe(loglik: LogLikTensor) -> EnsembleWeights:
    """Fit a single entropy-regularized weight row from validation data.

    This is the single-group case of :func:`fit_mmb`: every sample belongs
    to one group, so the solution is the softmax of each prompt's mean
    validation log-likelihood.  With no validation samples the entropy term
    alone decides and the weights are exactly uniform.
    """
    values = _as_loglik_values(loglik)
    assignments = np.ones((values.shape[0], 1))
    weights, report = _maximize(values, assignments)
    return EnsembleWeights(
        kind="bpe",
        weights=weights,
        prompt_ids=_prompt_ids_of(loglik, values.shape[1]),
        report=report,
    )


def fit_mmb(
    loglik: LogLikTensor,
    assignments,
    cluster_model: ClusterModel | None = None,
) -> EnsembleWeights:
    """Fit per-group weight rows under soft group assignments.

    ``assignments`` is (M, K) with rows summing to one, typically produced
    by :meth:`ClusterModel.assign_many` on validation embeddings.  Groups
    that receive no validation mass get uniform rows.  Pass the fitted
    ``cluster_model`` so the returned weights can assign test samples.
    """
    values = _as_loglik_values(loglik)
    a = _check_assignments(assignments, values.shape[0])
    if a.shape[1] < 1:
        raise DimensionError("assignments must cover at least one group")
    if cluster_model is not None and cluster_model.n_clusters != a.shape[1]:
        raise DimensionError(
            f"cluster model has {cluster_model.n_clusters} clusters, "
            f"assignments cover {a.shape[1]}"
        )
    weights, report = _maximize(values, a)
    return EnsembleWeights(
        kind="mmb",
        weights=weights,
        prompt_ids=_prompt_ids_of(loglik, values.shape[1]),
        cluster_model=cluster_model,
        report=report,
    )


def _prompt_ids_of(loglik, n: int) -> tuple:
    if isinstance(loglik, LogLikTensor):
        return loglik.prompt_ids
    return tuple(f"p{i}" for i in range(n))


def select_baseline(kind: str, loglik: LogLikTensor, seed: int = 0) -> EnsembleWeights:
    """Construct a non-fitted baseline weight row.

    ``standard`` puts all mass on one uniformly drawn prompt, ``average``
    spreads mass evenly, and ``best`` puts all mass on the prompt with the
    highest validation accuracy (a sample counts as correct when the true
    label's probability exceeds one half), breaking ties by higher mean
    log-likelihood and then by lower prompt index.
    """
    if kind not in BASELINE_KINDS:
        raise ValidationError(f"unknown baseline kind {kind!r}")
    values = _as_loglik_values(loglik)
    m, n = values.shape
    weights = np.zeros((1, n))
    if kind == "average":
        weights[0, :] = 1.0 / n
    elif kind == "standard":
        rng = np.random.default_rng(seed)
        weights[0, int(rng.integers(n))] = 1.0
    else:
        if m == 0:
            raise CapacityError("cannot pick a best prompt without validation samples")
        accuracy = np.mean(values > -np.log(2.0), axis=0)
        mean_loglik = values.mean(axis=0)
        best_idx = 0
        for a in range(1, n):
            better = (accuracy[a], mean_loglik[a]) > (accuracy[best_idx], mean_loglik[best_idx])
            if better:
                best_idx = a
        weights[0, best_idx] = 1.0
    return EnsembleWeights(
        kind=kind, weights=weights, prompt_ids=_prompt_ids_of(loglik, n)
    )


def predict(
    weights: EnsembleWeights,
    sample_probs: Mapping[str, Sequence[float]],
    embedding=None,
) -> np.ndarray:
    """Mix per-prompt choice probabilities into one predictive vector.

    ``sample_probs`` maps prompt id to that prompt's normalized choice
    probabilities for a single sample.  Mixture weights come straight from
    the weight row for non-``mmb`` kinds; ``mmb`` weights additionally need
    the sample's ``embedding`` to soft-assign it to groups, mixing rows by
    group membership.  The output is a convex combination of the inputs,
    so it is itself a probability vector.
    """
    rows = []
    for prompt_id in weights.prompt_ids:
        if prompt_id not in sample_probs:
            raise IntegrityError(f"no choice probabilities for prompt {prompt_id!r}")
        rows.append(np.asarray(sample_probs[prompt_id], dtype=np.float64))
    lengths = {row.shape for row in rows}
    if len(lengths) != 1 or rows[0].ndim != 1:
        raise DimensionError("per-prompt probability vectors disagree in length")
    stacked = np.stack(rows)
    if not np.all(np.isfinite(stacked)) or stacked.min() < 0.0:
        raise ValidationError("choice probabilities must be finite and nonnegative")
    if not np.allclose(stacked.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValidationError("each per-prompt probability row must sum to 1")
    if weights.kind == "mmb":
        if weights.cluster_model is None:
            raise ArgumentError("mmb weights need a cluster model to predict")
        if embedding is None:
            raise ArgumentError("mmb prediction needs the sample embedding")
        membership = weights.cluster_model.soft_assign(embedding)
        if membership.shape[0] != weights.n_groups:
            raise DimensionError(
                f"cluster model yields {membership.shape[0]} groups for "
                f"{weights.n_groups} weight rows"
            )
        return membership @ (weights.weights @ stacked)
    return weights.weights[0] @ stacked
