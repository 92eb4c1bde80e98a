"""Spherical k-means over image embeddings and soft cluster assignment.

Embeddings are compared by cosine similarity, so every vector is projected
onto the unit sphere before use.  A fitted :class:`ClusterModel` holds unit
length centroids and a temperature; test-time group membership is the
softmax of centroid similarities divided by that temperature.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    DimensionError,
    DomainError,
    FormatError,
    ValidationError,
)

DEFAULT_TEMPERATURE = 0.1


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError(f"{what} contains a zero vector")
    return x / norms


def similarity(a, b) -> float:
    """Cosine similarity between two vectors.

    Scale-invariant: similarity(c*a, b) == similarity(a, b) for any c > 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("similarity expects two vectors of equal dimension")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("similarity inputs must be finite")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("similarity is undefined for the zero vector")
    return float(a @ b / (na * nb))


@dataclass
class ClusterModel:
    """Unit-norm centroids plus the assignment temperature.

    ``objective_`` and ``history_`` are fit diagnostics (total within
    cluster cosine distance of the winning restart, and its per-iteration
    trajectory); they are not part of the serialized model.
    """

    centroids: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    objective_: float | None = field(default=None, compare=False)
    history_: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise DimensionError("centroids must be a (K, d) array with K >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise ValidationError("centroids must be finite")
        norms = np.linalg.norm(self.centroids, axis=1)
        if np.any(norms == 0.0):
            raise ValidationError("centroids must be nonzero")
        if not np.allclose(norms, 1.0, atol=1e-9):
            self.centroids = self.centroids / norms[:, None]
        if not np.isfinite(self.temperature) or self.temperature <= 0.0:
            raise DomainError("temperature must be a positive finite number")

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def soft_assign(self, embedding) -> np.ndarray:
        """Group membership probabilities for one embedding.

        Computed as softmax(similarities / temperature) with the maximum
        subtracted first, so extreme temperatures stay finite: the result
        approaches a one-hot vector as temperature goes to zero and the
        uniform vector as it grows.
        """
        embedding = np.asarray(embedding, dtype=np.float64)
        return self.assign_many(embedding[None, :])[0]

    def assign_many(self, embeddings) -> np.ndarray:
        """Row-wise :meth:`soft_assign` for an (n, d) array."""
        x = np.asarray(embeddings, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(
                f"expected embeddings of dimension {self.dim}, got shape {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise DomainError("embeddings must be finite")
        sims = _unit_rows(x, "embeddings") @ self.centroids.T
        scaled = sims / self.temperature
        scaled -= scaled.max(axis=1, keepdims=True)
        expd = np.exp(scaled)
        return expd / expd.sum(axis=1, keepdims=True)

    def save(self, path) -> None:
        """Write the model as a small JSON document (exact float round-trip)."""
        obj = {
            "kind": "cluster_model",
            "n_clusters": self.n_clusters,
            "dim": self.dim,
            "temperature": self.temperature,
            "centroids": [[float(v) for v in row] for row in self.centroids],
        }
        tmp = os.fspath(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.fspath(path))

    @classmethod
    def load(cls, path) -> "ClusterModel":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError:
                raise FormatError(f"{path}: not a valid cluster model file")
        if obj.get("kind") != "cluster_model":
            raise FormatError(f"{path}: not a cluster model file")
        model = cls(
            centroids=np.asarray(obj["centroids"], dtype=np.float64),
            temperature=float(obj["temperature"]),
        )
        if model.n_clusters != obj.get("n_clusters") or model.dim != obj.get("dim"):
            raise FormatError(f"{path}: centroid shape disagrees with header")
        return model


def _kmeans_once(x: np.ndarray, k: int, n_iter: int, rng: np.random.Generator):
    """One spherical k-means run; returns (objective, centroids, history)."""
    n = x.shape[0]
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    assignment = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(n_iter):
        sims = x @ centroids.T
        new_assignment = np.argmax(sims, axis=1)
        while True:
            # Re-seed empty clusters with the point farthest (by cosine)
            # from their stale centroid, stealing only from clusters that
            # keep at least one member so the fix cannot cascade.
            counts = np.bincount(new_assignment, minlength=k)
            empty = np.flatnonzero(counts == 0)
            if empty.size == 0:
                break
            z = int(empty[0])
            stealable = counts[new_assignment] >= 2
            candidates = np.flatnonzero(stealable)
            farthest = int(candidates[np.argmin(sims[candidates, z])])
            new_assignment[farthest] = z
        history.append(float(np.sum(1.0 - sims[np.arange(n), new_assignment])))
        converged = bool(np.array_equal(new_assignment, assignment))
        assignment = new_assignment
        for z in range(k):
            members = x[assignment == z]
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centroids[z] = mean / norm
        if converged:
            break
    sims = x @ centroids.T
    objective = float(np.sum(1.0 - sims[np.arange(n), np.argmax(sims, axis=1)]))
    return objective, centroids, tuple(history)


def fit_spherical_kmeans(
    embeddings,
    k: int,
    n_init: int = 3,
    n_iter: int = 1000,
    seed: int = 0,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ClusterModel:
    """Cluster unit-normalized embeddings by cosine distance.

    Runs ``n_init`` independent restarts with seeds derived from ``seed``
    and keeps the one with the smallest total within-cluster cosine
    distance (ties go to the earliest restart, so results are
    deterministic).  Iteration stops early once assignments stop changing.

    Parameters
    ----------
    embeddings : array-like, shape (n, d)
        Feature vectors; they are unit-normalized internally.
    k : int
        Number of clusters, 1 <= k <= n.
    n_init, n_iter, seed : int
        Restart count, iteration cap per restart, and the master seed.
    temperature : float
        Stored on the model for later soft assignment.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("embeddings must be a 2-d array")
    if not np.all(np.isfinite(x)):
        raise ValidationError("embeddings must be finite")
    if k < 1:
        raise DomainError(f"need at least one cluster, got k={k}")
    if x.shape[0] < k:
        raise CapacityError(f"cannot fit {k} clusters to {x.shape[0]} points")
    if n_init < 1 or n_iter < 1:
        raise DomainError("n_init and n_iter must be positive")
    x = _unit_rows(x, "embeddings")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.default_rng(child)
        objective, centroids, history = _kmeans_once(x, k, n_iter, rng)
        if best is None or objective < best[0]:
            best = (objective, centroids, history)
    model = ClusterModel(centroids=best[1], temperature=temperature)
    model.objective_ = best[0]
    model.history_ = best[2]
    return model
