"""K-means over embedding vectors and routing of data groups to learners."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset


@dataclass
class ClusterAssignment:
    assignment: dict[str, int]        # sample id -> cluster index
    centroids: np.ndarray             # (K, d) float64
    inertia: float                    # sum of squared distances to assigned centroids
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.assignment[i] for i in ids], dtype=np.int64)

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "cluster"])
            for sid, c in self.assignment.items():
                w.writerow([sid, c])


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (N, K), floored at 0 against float cancellation."""
    d2 = (x * x).sum(axis=1)[:, None] + (centroids * centroids).sum(axis=1)[None, :] - 2.0 * (x @ centroids.T)
    return np.maximum(d2, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, the rest proportional to squared distance."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all remaining points coincide with a centroid
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    vectors: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    ids: Optional[Sequence[str]] = None,
    init: Optional[np.ndarray] = None,
) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeding, deterministic for a fixed seed.

    Stops when assignments are stable, the relative inertia drop falls below
    `tol`, or `max_iter` is reached. Empty clusters are repaired by handing
    them the point of the largest cluster farthest from that cluster's
    centroid. Ties in the nearest-centroid assignment go to the lowest index.
    `init` overrides the seeding with explicit (k, d) starting centroids.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (N, d) vectors, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    if ids is None:
        ids = [str(i) for i in range(n)]
    elif len(ids) != n:
        raise ValueError(f"{len(ids)} ids for {n} vectors")

    rng = np.random.default_rng(seed)
    if init is not None:
        centroids = np.asarray(init, dtype=np.float64).copy()
        if centroids.shape != (k, x.shape[1]):
            raise ValueError(f"init centroids must be ({k}, {x.shape[1]}), got {centroids.shape}")
    else:
        centroids = _kmeans_pp(x, k, rng)

    labels = np.full(n, -1, dtype=np.int64)
    inertia_history: list[float] = []
    inertia = float("inf")
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)

        # repair empty clusters before the centroid update so no mean is undefined
        sizes = np.bincount(new_labels, minlength=k)
        for c in range(k):
            if sizes[c] == 0:
                donor = int(sizes.argmax())
                members = np.flatnonzero(new_labels == donor)
                far = members[int(((x[members] - centroids[donor]) ** 2).sum(axis=1).argmax())]
                new_labels[far] = c
                sizes[donor] -= 1
                sizes[c] += 1

        stable = bool((new_labels == labels).all())
        labels = new_labels
        for c in range(k):
            centroids[c] = x[labels == c].mean(axis=0)
        prev = inertia
        inertia = float(((x - centroids[labels]) ** 2).sum())
        inertia_history.append(inertia)
        if stable:
            break
        if np.isfinite(prev) and prev > 0 and (prev - inertia) <= tol * prev:
            break

    return ClusterAssignment(
        assignment={ids[i]: int(labels[i]) for i in range(n)},
        centroids=centroids,
        inertia=inertia,
        n_iter=n_iter,
        inertia_history=inertia_history,
    )


def assign_groups(assignment: ClusterAssignment, data: Dataset) -> list[Dataset]:
    """Split `data` into K subsets by cluster index; cluster k routes to learner k."""
    groups: list[list] = [[] for _ in range(assignment.k)]
    for sample in data:
        try:
            c = assignment.assignment[sample.id]
        except KeyError:
            raise ValueError(f"assignment does not cover sample {sample.id}") from None
        groups[c].append(sample)
    return [Dataset(g, n_classes=data.n_classes) for g in groups]
