"""Clustering, retrieval, and segmentation metrics: NMI, Recall@K, ranked retrieval, Dice."""
from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .clustering import kmeans
from .data import Dataset
from .layout import SubspaceLayout
from .model import EmbeddingNet, embed_dataset


def nmi(labels: Sequence[int], clusters: Sequence[int]) -> float:
    """Normalized mutual information with geometric-mean normalization.

    I(labels; clusters) / sqrt(H(labels) * H(clusters)) with natural-log
    entropies; 0.0 when either marginal entropy is zero.
    """
    la = np.asarray(labels)
    cl = np.asarray(clusters)
    if la.shape != cl.shape or la.ndim != 1:
        raise ValueError(f"labels and clusters must be equal-length 1-D, got {la.shape} vs {cl.shape}")
    n = la.size
    if n == 0:
        raise ValueError("empty inputs")
    _, li = np.unique(la, return_inverse=True)
    _, ci = np.unique(cl, return_inverse=True)
    cont = np.zeros((li.max() + 1, ci.max() + 1), dtype=np.float64)
    np.add.at(cont, (li, ci), 1.0)
    pij = cont / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    h_l = float(-(pi[pi > 0] * np.log(pi[pi > 0])).sum())
    h_c = float(-(pj[pj > 0] * np.log(pj[pj > 0])).sum())
    if h_l <= 0.0 or h_c <= 0.0:
        return 0.0
    mask = pij > 0
    mi = float((pij[mask] * np.log(pij[mask] / np.outer(pi, pj)[mask])).sum())
    return float(min(max(mi / np.sqrt(h_l * h_c), 0.0), 1.0))


def recall_at_k(embeddings: np.ndarray, labels: Sequence[int], k: int) -> float:
    """Fraction of queries whose k nearest neighbors contain a same-class sample.

    Euclidean distances, ties broken by index, the query itself excluded. A
    query whose class has no other member counts as a miss at every k.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    la = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != la.size:
        raise ValueError(f"need (N, d) embeddings with N labels, got {x.shape} and {la.size}")
    n = x.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={n}")
    d2 = (x * x).sum(axis=1)[:, None] + (x * x).sum(axis=1)[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)
    nn_idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    hits = (la[nn_idx] == la[:, None]).any(axis=1)
    return float(hits.mean())


def retrieve(query: np.ndarray, gallery: np.ndarray, ids: Sequence[str], n: int) -> list[str]:
    """Ids of the n gallery vectors nearest to the query; distance ties break by id order."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or q.shape != (g.shape[1],):
        raise ValueError(f"query shape {q.shape} incompatible with gallery {g.shape}")
    if len(ids) != g.shape[0]:
        raise ValueError(f"{len(ids)} ids for {g.shape[0]} gallery vectors")
    if n > g.shape[0]:
        raise ValueError(f"cannot retrieve {n} from a gallery of {g.shape[0]}")
    dist = np.sqrt(((g - q) ** 2).sum(axis=1))
    order = sorted(range(g.shape[0]), key=lambda i: (dist[i], ids[i]))
    return [ids[i] for i in order[:n]]


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap 2|a n b| / (|a| + |b|) of two binary masks; 1.0 when both are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    for name, m in (("a", a), ("b", b)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"mask {name} is not binary")
    a = a.astype(bool)
    b = b.astype(bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


@dataclass
class MetricReport:
    nmi: float
    recall: dict[int, float]
    n_queries: int
    seed: int
    timestamp: str = field(default_factory=lambda: datetime.datetime.now(datetime.timezone.utc).isoformat())

    def __post_init__(self):
        for name, v in [("nmi", self.nmi)] + [(f"recall@{k}", v) for k, v in self.recall.items()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "nmi": self.nmi,
            "recall": {str(k): v for k, v in self.recall.items()},
            "n_queries": self.n_queries,
            "seed": self.seed,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            nmi=d["nmi"],
            recall={int(k): v for k, v in d["recall"].items()},
            n_queries=d["n_queries"],
            seed=d["seed"],
            timestamp=d.get("timestamp", ""),
        )

    def append_jsonl(self, path: str | Path) -> None:
        with open(path, "a") as f:
            f.write(json.dumps(self.to_dict()) + "\n")


def evaluate_checkpoint(
    model: EmbeddingNet,
    layout: Optional[SubspaceLayout],
    dataset: Dataset,
    seed: int = 0,
    recall_ks: Sequence[int] = (1, 4),
    restarts: int = 10,
) -> MetricReport:
    """Standard retrieval-evaluation protocol on the full normalized embedding.

    K-means with K = number of ground-truth classes present, best inertia over
    `restarts` seeded runs, scored by NMI; Recall@k over the same embeddings.
    The layout is accepted for interface symmetry; metrics always use the full
    embedding space.
    """
    emb = embed_dataset(model, dataset)
    labels = dataset.labels()
    n_classes = len(np.unique(labels))
    best = None
    for r in range(restarts):
        res = kmeans(emb, n_classes, seed=seed + r, ids=dataset.ids())
        if best is None or res.inertia < best.inertia:
            best = res
    cluster_labels = best.labels_for(dataset.ids())
    recall = {k: recall_at_k(emb, labels, k) for k in recall_ks if k < len(dataset)}
    return MetricReport(
        nmi=nmi(labels, cluster_labels),
        recall=recall,
        n_queries=len(dataset),
        seed=seed,
    )
