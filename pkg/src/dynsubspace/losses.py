"""Margin loss, pair mining, and class-balanced batch construction."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .data import Dataset, SampleRecord
from .layout import SubspaceLayout, sub_embedding

PAIR_POLICIES = ("all", "anchor-random-negative")

# Guards the sqrt gradient at coincident points; far below any meaningful distance.
_DIST_EPS_SQ = 1e-30


@dataclass(frozen=True)
class MarginLossParams:
    """Hinge parameters: beta is the similar/dissimilar boundary, alpha the separation margin."""

    alpha: float = 0.2
    beta: float = 1.2

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass
class PairSet:
    """Mined (anchor, partner, mu) index triples over a batch; mu=+1 for same-class pairs."""

    pairs: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def n_positive(self) -> int:
        return sum(1 for _, _, mu in self.pairs if mu == 1)

    @property
    def n_negative(self) -> int:
        return sum(1 for _, _, mu in self.pairs if mu == -1)


def pairwise_distance(z_i, z_j):
    """Euclidean distance between two equal-length vectors (torch or numpy)."""
    if torch.is_tensor(z_i) or torch.is_tensor(z_j):
        z_i, z_j = torch.as_tensor(z_i), torch.as_tensor(z_j)
        if z_i.shape != z_j.shape:
            raise ValueError(f"dimension mismatch: {tuple(z_i.shape)} vs {tuple(z_j.shape)}")
        return torch.linalg.vector_norm(z_i - z_j)
    z_i, z_j = np.asarray(z_i), np.asarray(z_j)
    if z_i.shape != z_j.shape:
        raise ValueError(f"dimension mismatch: {z_i.shape} vs {z_j.shape}")
    return float(np.linalg.norm(z_i - z_j))


def margin_loss_pair(dist, mu: int, params: MarginLossParams):
    """max(0, alpha + mu * (dist - beta)) for one pair. Works on floats and tensors."""
    if torch.is_tensor(dist):
        return torch.clamp(params.alpha + mu * (dist - params.beta), min=0.0)
    return max(0.0, params.alpha + mu * (dist - params.beta))


def mine_pairs(
    labels: Sequence[int], policy: str = "all", rng: Optional[np.random.Generator] = None
) -> PairSet:
    """Build the pair set for a batch.

    "all": every unordered pair once. "anchor-random-negative": every positive
    pair once, plus one uniformly drawn negative partner per anchor (anchors
    without any negative are skipped).
    """
    if policy not in PAIR_POLICIES:
        raise ValueError(f"unknown pair policy {policy!r}, expected one of {PAIR_POLICIES}")
    labels = list(labels)
    n = len(labels)
    if n < 2:
        raise ValueError(f"need at least 2 samples to mine pairs, got {n}")
    pairs: list[tuple[int, int, int]] = []
    if policy == "all":
        for i in range(n):
            for j in range(i + 1, n):
                pairs.append((i, j, 1 if labels[i] == labels[j] else -1))
        return PairSet(pairs)
    # anchor-random-negative
    if rng is None:
        rng = np.random.default_rng()
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] == labels[j]:
                pairs.append((i, j, 1))
    for i in range(n):
        negatives = [j for j in range(n) if labels[j] != labels[i]]
        if negatives:
            j = int(rng.choice(negatives))
            pairs.append((i, j, -1))
    return PairSet(pairs)


def build_batch(
    group: Union[Dataset, Sequence[SampleRecord]],
    batch_size: int,
    per_class: int,
    rng: np.random.Generator,
) -> list[SampleRecord]:
    """Class-balanced batch: per_class samples from each of batch_size/per_class classes.

    Classes are drawn uniformly without replacement from the group's classes;
    classes with fewer than per_class samples are sampled with replacement.
    A single-class group falls back to sampling the whole batch from it (with
    a warning: no negative pairs will exist). If the group has fewer distinct
    classes than batch_size/per_class, the available classes are cycled.
    """
    samples = list(group)
    if not samples:
        raise ValueError("cannot build a batch from an empty group")
    if batch_size % per_class != 0:
        raise ValueError(f"batch_size {batch_size} must be divisible by per_class {per_class}")
    by_class: dict[int, list[SampleRecord]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    classes = sorted(by_class)

    if len(classes) == 1:
        warnings.warn(
            f"group contains a single class ({classes[0]}); batch will have no negative pairs",
            RuntimeWarning,
            stacklevel=2,
        )
        pool = by_class[classes[0]]
        idx = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
        return [pool[int(i)] for i in idx]

    n_cls = batch_size // per_class
    if len(classes) >= n_cls:
        chosen = [classes[int(i)] for i in rng.choice(len(classes), size=n_cls, replace=False)]
    else:
        order = [classes[int(i)] for i in rng.permutation(len(classes))]
        chosen = [order[i % len(order)] for i in range(n_cls)]

    batch: list[SampleRecord] = []
    for c in chosen:
        pool = by_class[c]
        idx = rng.choice(len(pool), size=per_class, replace=len(pool) < per_class)
        batch.extend(pool[int(i)] for i in idx)
    perm = rng.permutation(len(batch))
    return [batch[int(i)] for i in perm]


@dataclass
class BatchLoss:
    """Summed margin loss over mined pairs plus the counts needed for averaging."""

    total: torch.Tensor  # 0-dim tensor, sum over all mined pairs
    n_pairs: int
    n_active: int        # pairs with strictly positive loss

    @property
    def mean_active(self) -> torch.Tensor:
        """Sum divided by the active-pair count; the quantity the trainer optimizes."""
        return self.total / max(self.n_active, 1)


def learner_loss_batch(
    embeddings: torch.Tensor,
    labels: Sequence[int],
    layout: SubspaceLayout,
    k: int,
    params: MarginLossParams,
    policy: str = "all",
    rng: Optional[np.random.Generator] = None,
) -> BatchLoss:
    """Margin loss of learner k over a batch, on its L2-normalized sub-embedding.

    Distances use a 1e-30 floor under the square root so coincident embeddings
    give a zero (not NaN) gradient. Returns the pair sum with pair counts;
    an empty pair set yields total 0 with count 0.
    """
    if embeddings.ndim != 2:
        raise ValueError(f"expected (B, d) embeddings, got shape {tuple(embeddings.shape)}")
    if embeddings.shape[0] != len(labels):
        raise ValueError(f"{embeddings.shape[0]} embeddings but {len(labels)} labels")
    sub = sub_embedding(embeddings, layout, k)
    pair_set = mine_pairs(labels, policy, rng) if len(labels) >= 2 else PairSet()
    if not pair_set.pairs:
        return BatchLoss(total=embeddings.sum() * 0.0, n_pairs=0, n_active=0)
    ii = torch.as_tensor([p[0] for p in pair_set.pairs], dtype=torch.long, device=embeddings.device)
    jj = torch.as_tensor([p[1] for p in pair_set.pairs], dtype=torch.long, device=embeddings.device)
    mu = torch.as_tensor([p[2] for p in pair_set.pairs], dtype=sub.dtype, device=embeddings.device)
    diff = sub[ii] - sub[jj]
    dist = torch.sqrt(torch.clamp((diff * diff).sum(dim=-1), min=_DIST_EPS_SQ))
    per_pair = torch.clamp(params.alpha + mu * (dist - params.beta), min=0.0)
    n_active = int((per_pair > 0).sum().item())
    return BatchLoss(total=per_pair.sum(), n_pairs=len(pair_set), n_active=n_active)
