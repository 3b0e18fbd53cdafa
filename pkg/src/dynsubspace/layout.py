"""Partition of the embedding dimensions into committed learner slices plus a remainder.

A layout with K learners holds K-1 committed ("frozen") index sets e_1..e_{K-1}
and the remainder e_r owned by the newest learner. Committed means the index
set no longer changes; the rows themselves keep training on that learner's
data group. Learner indices are 1-based: learner k < K maps to frozen slice k,
learner K maps to the remainder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

NORM_EPS = 1e-12


@dataclass
class SubspaceLayout:
    frozen_slices: list[list[int]] = field(default_factory=list)
    remainder: list[int] = field(default_factory=list)

    @classmethod
    def initial(cls, d: int) -> "SubspaceLayout":
        """Single-learner layout: every coordinate is remainder."""
        if d < 1:
            raise ValueError(f"embedding size must be >= 1, got {d}")
        return cls(frozen_slices=[], remainder=list(range(d)))

    @classmethod
    def static_split(cls, d: int, k: int) -> "SubspaceLayout":
        """Fixed equal-size split into k contiguous slices (the static baseline).

        When d is not divisible by k the first d % k slices get one extra
        coordinate. The last slice plays the remainder role and never shrinks.
        """
        if k < 1 or k > d:
            raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
        base, extra = divmod(d, k)
        slices, start = [], 0
        for i in range(k):
            size = base + (1 if i < extra else 0)
            slices.append(list(range(start, start + size)))
            start += size
        return cls(frozen_slices=slices[:-1], remainder=slices[-1])

    @property
    def k(self) -> int:
        return len(self.frozen_slices) + 1

    @property
    def d(self) -> int:
        return sum(len(s) for s in self.frozen_slices) + len(self.remainder)

    def slice_indices(self, k: int) -> list[int]:
        """Coordinates owned by learner k (1-based; k == K returns the remainder)."""
        if not 1 <= k <= self.k:
            raise IndexError(f"learner index {k} out of range 1..{self.k}")
        if k == self.k:
            return list(self.remainder)
        return list(self.frozen_slices[k - 1])

    def sizes(self) -> list[int]:
        return [len(s) for s in self.frozen_slices] + [len(self.remainder)]

    def commit(self, coords: Sequence[int]) -> "SubspaceLayout":
        """Move `coords` from the remainder into a new frozen slice e_K.

        Returns a new layout with K+1 learners; the input layout is untouched.
        """
        coords = sorted(set(coords))
        if not coords:
            raise ValueError("cannot commit an empty slice")
        rem = set(self.remainder)
        bad = [c for c in coords if c not in rem]
        if bad:
            raise ValueError(f"coordinates {bad} are not in the remainder")
        new_rem = sorted(rem - set(coords))
        if not new_rem:
            raise ValueError("commit would leave an empty remainder")
        return SubspaceLayout(
            frozen_slices=[list(s) for s in self.frozen_slices] + [coords],
            remainder=new_rem,
        )

    def validate(self, d: int) -> None:
        """Partition property: slices + remainder disjointly cover {0..d-1}."""
        seen: set[int] = set()
        for s in self.frozen_slices + [self.remainder]:
            if not s:
                raise ValueError("layout contains an empty slice")
            overlap = seen.intersection(s)
            if overlap:
                raise ValueError(f"layout slices overlap on coordinates {sorted(overlap)}")
            seen.update(s)
        if seen != set(range(d)):
            raise ValueError(f"layout covers {len(seen)} coordinates, expected exactly 0..{d - 1}")

    def to_dict(self) -> dict:
        return {"frozen_slices": [list(s) for s in self.frozen_slices], "remainder": list(self.remainder)}

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceLayout":
        return cls(
            frozen_slices=[list(map(int, s)) for s in d["frozen_slices"]],
            remainder=list(map(int, d["remainder"])),
        )


def sub_embedding(
    embedding: torch.Tensor, layout: SubspaceLayout, k: int, normalize: bool = True
) -> torch.Tensor:
    """Coordinates of `embedding` owned by learner k, L2-normalized by default.

    Accepts a single d-vector or a (..., d) batch. Normalization divides by
    (norm + 1e-12) so zero sub-vectors stay zero instead of producing NaNs.
    """
    idx = torch.as_tensor(layout.slice_indices(k), dtype=torch.long, device=embedding.device)
    sub = embedding.index_select(-1, idx)
    if not normalize:
        return sub
    norm = torch.linalg.vector_norm(sub, dim=-1, keepdim=True)
    return sub / (norm + NORM_EPS)


def normalize_embedding(embedding: torch.Tensor) -> torch.Tensor:
    """L2-normalize full embeddings (the space used for clustering and retrieval)."""
    norm = torch.linalg.vector_norm(embedding, dim=-1, keepdim=True)
    return embedding / (norm + NORM_EPS)
