"""First-order neuron scoring of the embedding layer and plateau-driven learner splits.

The score of an embedding coordinate is |activation x gradient|, the Taylor
estimate of how much the loss would change if that coordinate were zeroed.
High-scoring remainder coordinates are grouped into a new frozen slice when
training plateaus.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SampleRecord, stack_images
from .layout import SubspaceLayout
from .model import EmbeddingNet


class SplitRefused(RuntimeError):
    """Raised when the remainder is too small to carve out another learner."""


@dataclass
class NeuronScoreVector:
    """Per-dimension scores, raw and max-normalized to [0, 1]."""

    raw: np.ndarray         # (d,) non-negative
    normalized: np.ndarray  # (d,) raw / max(raw), or all zeros when max(raw) == 0

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "NeuronScoreVector":
        raw = np.asarray(raw, dtype=np.float64)
        if (raw < 0).any():
            raise ValueError("raw scores must be non-negative")
        m = raw.max() if raw.size else 0.0
        normalized = raw / m if m > 0 else np.zeros_like(raw)
        return cls(raw=raw, normalized=normalized)

    @property
    def all_zero(self) -> bool:
        return bool((self.raw == 0).all())


def score_neurons(
    model: EmbeddingNet,
    layout: SubspaceLayout,
    scoring_data: Sequence[SampleRecord],
    loss_fn: Callable[[torch.Tensor, list[int]], torch.Tensor],
    batch_size: int = 32,
) -> NeuronScoreVector:
    """Score each remainder coordinate as mean_i |activation_i * dloss/dactivation_i|.

    `loss_fn(embeddings, labels)` must return the scalar training loss for a
    batch; its gradient at the embedding layer is read back per sample.
    Frozen coordinates score 0 by definition. Runs in eval mode so batch-norm
    noise does not leak into the scores. An all-zero result (dead loss) means
    no split is possible.
    """
    samples = list(scoring_data)
    if not samples:
        raise ValueError("scoring data is empty")
    if not layout.remainder:
        raise ValueError("layout has an empty remainder")
    d = model.embedding_dim
    raw = np.zeros(d, dtype=np.float64)
    total = 0
    was_training = model.training
    model.eval()
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = torch.from_numpy(stack_images(chunk))
            z = model(x).embedding
            z.retain_grad()
            loss = loss_fn(z, [s.label for s in chunk])
            model.zero_grad(set_to_none=True)
            loss.backward()
            if z.grad is not None:
                raw += (z.detach() * z.grad).abs().sum(dim=0).double().numpy()
            total += len(chunk)
    finally:
        model.zero_grad(set_to_none=True)
        model.train(was_training)
    raw /= total
    frozen = [i for s in layout.frozen_slices for i in s]
    raw[frozen] = 0.0
    return NeuronScoreVector.from_raw(raw)


def split_learner(
    scores: NeuronScoreVector,
    layout: SubspaceLayout,
    min_remainder: int,
    threshold: float = 0.5,
) -> SubspaceLayout:
    """Commit the remainder coordinates scoring above `threshold` as a new slice.

    Guards: an empty qualifying set falls back to the single top-scored
    coordinate; a qualifying set that would shrink the remainder below
    `min_remainder` is truncated to its top (remainder - min_remainder)
    coordinates. Raises SplitRefused when the remainder is already at or
    below `min_remainder`. Score ties resolve to the lower coordinate index.
    """
    rem = list(layout.remainder)
    if len(rem) <= min_remainder:
        raise SplitRefused(
            f"remainder has {len(rem)} coordinates, need more than min_remainder={min_remainder} to split"
        )
    norm = scores.normalized
    qualifying = [i for i in rem if norm[i] > threshold]
    if not qualifying:
        qualifying = [max(rem, key=lambda i: (norm[i], -i))]
    max_take = len(rem) - min_remainder
    if len(qualifying) > max_take:
        qualifying = sorted(qualifying, key=lambda i: (-norm[i], i))[:max_take]
    return layout.commit(qualifying)
