"""Synthetic judge benchmarks with known cluster structure.

Generates datasets in the exact on-disk formats that the ingest module
reads: judge records with per-prompt choice probabilities, embedding
tables, and split assignments.  Every sample belongs to one of a small
number of latent embedding clusters, and each (cluster, prompt) pair has
a known probability that the judge's argmax choice is the true label.
The confidence the judge reports is drawn independently of whether it is
right, which makes the raw judge miscalibrated by construction.

A second generator produces option pairs with no ground-truth preference
at all.  The judge still emits confident choices on those pairs, so any
ensemble's mean confidence above one half measures how much unwarranted
decisiveness survives the weighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import os
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, FormatError, ValidationError
from .ingest import DatasetBundle, EmbeddingTable, JudgeRecord, assemble_bundle

__all__ = [
    "SynthConfig",
    "GroundTruth",
    "default_reliability",
    "generate_benchmark",
    "generate_no_preference_pairs",
]

_CENTROID_STREAM = 0
_BENCHMARK_STREAM = 1
_NO_PREFERENCE_STREAM = 2


def default_reliability(k_true: int, n_prompts: int, tilt: float = 0.05) -> np.ndarray:
    """Reliability matrix with a global quality ramp plus cluster tilts.

    Prompt quality rises linearly from 0.6 to 0.9 across prompts, and each
    prompt is slightly better on one cluster (round-robin) than the others.
    The tilts cancel across clusters, so the marginal quality of a prompt
    equals its ramp value.
    """
    base = np.linspace(0.60, 0.90, n_prompts)
    rel = np.tile(base, (k_true, 1))
    if k_true > 1 and tilt != 0.0:
        for a in range(n_prompts):
            rel[:, a] -= tilt / (k_true - 1)
            rel[a % k_true, a] += tilt + tilt / (k_true - 1)
    return np.clip(rel, 0.02, 0.98)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic benchmark generator.

    reliability is a (k_true, n_prompts) matrix of probabilities that a
    given prompt's argmax matches the true label for samples of a given
    cluster; None selects `default_reliability`.  concentration is the
    standard deviation of the isotropic Gaussian noise added to a sample's
    cluster centroid before renormalisation, so small values give tight,
    well separated clusters and large values give heavily overlapping
    ones.  conf_low/conf_high bound the uniform distribution that judge
    confidences are drawn from, independent of correctness.
    prompt_correlation in [0, 1] makes prompt errors co-occur: 0 gives
    independent mistakes, 1 makes every prompt fail on the same hard
    samples.
    """

    k_true: int = 1
    n_prompts: int = 10
    dim: int = 16
    reliability: Optional[Sequence[Sequence[float]]] = None
    concentration: float = 0.1
    n_val: int = 10
    n_support: int = 512
    n_test: int = 1000
    conf_low: float = 0.96
    conf_high: float = 0.999
    prompt_correlation: float = 0.5
    npref_balanced: bool = False
    seed: int = 0

    def reliability_matrix(self) -> np.ndarray:
        if self.reliability is None:
            rel = default_reliability(self.k_true, self.n_prompts)
        else:
            rel = np.asarray(self.reliability, dtype=np.float64)
        if rel.shape != (self.k_true, self.n_prompts):
            raise DomainError(
                f"reliability must have shape ({self.k_true}, {self.n_prompts}), "
                f"got {rel.shape}"
            )
        if not np.all(np.isfinite(rel)) or np.any(rel < 0.0) or np.any(rel > 1.0):
            raise DomainError("reliability entries must lie in [0, 1]")
        return rel

    def validate(self) -> None:
        if self.k_true < 1:
            raise DomainError("k_true must be at least 1")
        if self.n_prompts < 1:
            raise DomainError("n_prompts must be at least 1")
        if self.dim < 2:
            raise DomainError("dim must be at least 2")
        if self.concentration < 0.0:
            raise DomainError("concentration must be nonnegative")
        if min(self.n_val, self.n_support, self.n_test) < 1:
            raise DomainError("split sizes must be positive")
        if not (0.5 < self.conf_low <= self.conf_high < 1.0):
            raise DomainError("need 0.5 < conf_low <= conf_high < 1")
        if not (0.0 <= self.prompt_correlation <= 1.0):
            raise DomainError("prompt_correlation must lie in [0, 1]")
        self.reliability_matrix()


@dataclass
class GroundTruth:
    """Latent state behind a generated benchmark, kept as a side file."""

    reliability: np.ndarray
    centroids: np.ndarray
    cluster_of: Dict[str, int] = field(default_factory=dict)
    label_of: Dict[str, int] = field(default_factory=dict)

    def save(self, path: str) -> None:
        payload = {
            "kind": "ground_truth",
            "reliability": [[repr(float(v)) for v in row] for row in self.reliability],
            "centroids": [[repr(float(v)) for v in row] for row in self.centroids],
            "cluster_of": {k: int(v) for k, v in sorted(self.cluster_of.items())},
            "label_of": {k: int(v) for k, v in sorted(self.label_of.items())},
        }
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "GroundTruth":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("kind") != "ground_truth":
            raise FormatError(f"{path}: not a ground truth file")
        return cls(
            reliability=np.array(
                [[float(v) for v in row] for row in payload["reliability"]],
                dtype=np.float64,
            ),
            centroids=np.array(
                [[float(v) for v in row] for row in payload["centroids"]],
                dtype=np.float64,
            ),
            cluster_of={k: int(v) for k, v in payload["cluster_of"].items()},
            label_of={k: int(v) for k, v in payload["label_of"].items()},
        )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("degenerate zero vector while normalising")
    return x / norms


def _draw_centroids(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _CENTROID_STREAM]))
    return _unit_rows(rng.standard_normal((config.k_true, config.dim)))


def _draw_embeddings(
    rng: np.random.Generator, centroids: np.ndarray, clusters: np.ndarray, spread: float
) -> np.ndarray:
    noise = rng.standard_normal((clusters.size, centroids.shape[1]))
    return _unit_rows(centroids[clusters] + spread * noise)


def _correctness(
    rng: np.random.Generator, rel_rows: np.ndarray, correlation: float
) -> np.ndarray:
    """Bernoulli correctness per (sample, prompt) with shared-difficulty coupling.

    Each sample draws one shared difficulty value; each prompt either reuses
    it (with probability `correlation`) or draws its own.  Marginally every
    prompt is correct with exactly its reliability, but large correlation
    makes all prompts fail together on hard samples.
    """
    m, n = rel_rows.shape
    shared = rng.uniform(size=(m, 1))
    own = rng.uniform(size=(m, n))
    use_shared = rng.uniform(size=(m, n)) < correlation
    crit = np.where(use_shared, shared, own)
    return crit < rel_rows


def generate_benchmark(config: SynthConfig) -> Tuple[DatasetBundle, GroundTruth]:
    """Build a labelled benchmark bundle plus its latent ground truth.

    Validation and test samples carry judge records for every prompt; the
    support split carries embeddings only.  All randomness comes from the
    config seed, and repeated calls produce identical objects.
    """
    config.validate()
    rel = config.reliability_matrix()
    centroids = _draw_centroids(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _BENCHMARK_STREAM]))

    n_total = config.n_val + config.n_support + config.n_test
    clusters = rng.integers(0, config.k_true, size=n_total)
    embeddings = _draw_embeddings(rng, centroids, clusters, config.concentration)
    labels = rng.integers(0, 2, size=n_total)

    sample_ids = [f"s{i:06d}" for i in range(n_total)]
    val_ids = sample_ids[: config.n_val]
    support_ids = sample_ids[config.n_val : config.n_val + config.n_support]
    test_ids = sample_ids[config.n_val + config.n_support :]
    recorded = np.ones(n_total, dtype=bool)
    recorded[config.n_val : config.n_val + config.n_support] = False

    rel_rows = rel[clusters]
    correct = _correctness(rng, rel_rows, config.prompt_correlation)
    conf = rng.uniform(config.conf_low, config.conf_high, size=correct.shape)
    p_true = np.where(correct, conf, 1.0 - conf)

    prompt_ids = [f"p{a:02d}" for a in range(config.n_prompts)]
    records = []
    for i in np.flatnonzero(recorded):
        label = int(labels[i])
        for a, pid in enumerate(prompt_ids):
            pt = float(p_true[i, a])
            probs = [pt, 1.0 - pt] if label == 0 else [1.0 - pt, pt]
            records.append(
                JudgeRecord(
                    sample_id=sample_ids[i],
                    prompt_id=pid,
                    class_logprobs=tuple(np.log(probs)),
                    label=label,
                )
            )

    table = EmbeddingTable({sid: embeddings[i] for i, sid in enumerate(sample_ids)})
    split_of = {sid: "validation" for sid in val_ids}
    split_of.update({sid: "support" for sid in support_ids})
    split_of.update({sid: "test" for sid in test_ids})
    bundle = assemble_bundle(records, table, splits=split_of)
    bundle.validate()

    truth = GroundTruth(
        reliability=rel,
        centroids=centroids,
        cluster_of={sid: int(clusters[i]) for i, sid in enumerate(sample_ids)},
        label_of={sid: int(labels[i]) for i, sid in enumerate(sample_ids)},
    )
    return bundle, truth


def generate_no_preference_pairs(
    config: SynthConfig, n_samples: Optional[int] = None
) -> DatasetBundle:
    """Unlabelled pairs where neither option is actually better.

    The judge still reports a confident choice on each prompt; the direction
    is a fair coin per (sample, prompt) draw.  With ``npref_balanced`` every
    sample gets an exactly half-and-half split of prompt directions, so a
    uniform ensemble cancels to one half up to confidence jitter.  Samples
    share the latent cluster geometry of :func:`generate_benchmark` for the
    same config, so cluster models fit on a benchmark transfer.  The bundle
    has only a test split and no labels.
    """
    config.validate()
    if n_samples is None:
        n_samples = config.n_test
    if n_samples < 1:
        raise DomainError("n_samples must be positive")
    centroids = _draw_centroids(config)
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _NO_PREFERENCE_STREAM])
    )

    clusters = rng.integers(0, config.k_true, size=n_samples)
    embeddings = _draw_embeddings(rng, centroids, clusters, config.concentration)

    n = config.n_prompts
    if config.npref_balanced:
        if n % 2 != 0:
            raise DomainError("balanced direction mode needs an even prompt count")
        base = np.array([0] * (n // 2) + [1] * (n // 2), dtype=np.int64)
        toward_first = np.empty((n_samples, n), dtype=np.int64)
        for i in range(n_samples):
            toward_first[i] = rng.permutation(base)
    else:
        toward_first = rng.integers(0, 2, size=(n_samples, n))
    conf = rng.uniform(config.conf_low, config.conf_high, size=(n_samples, n))

    sample_ids = [f"n{i:06d}" for i in range(n_samples)]
    prompt_ids = [f"p{a:02d}" for a in range(n)]
    records = []
    for i, sid in enumerate(sample_ids):
        for a, pid in enumerate(prompt_ids):
            c = float(conf[i, a])
            probs = [c, 1.0 - c] if toward_first[i, a] else [1.0 - c, c]
            records.append(
                JudgeRecord(
                    sample_id=sid,
                    prompt_id=pid,
                    class_logprobs=tuple(np.log(probs)),
                    label=None,
                )
            )

    table = EmbeddingTable({sid: embeddings[i] for i, sid in enumerate(sample_ids)})
    bundle = assemble_bundle(
        records, table, splits={sid: "test" for sid in sample_ids}
    )
    bundle.validate(require_test_labels=False)
    return bundle
