"""In-memory image datasets: sample records, labels, and optional ground-truth masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np


@dataclass
class SampleRecord:
    """One image with its class label and an optional ground-truth mask.

    The image is channel-first float32 with values in [0, 1]. The mask, when
    present, is evaluation-only: a {0, 1} array matching the image's spatial
    dims. It is never consumed by the metric-learning trainer.
    """

    id: str
    image: np.ndarray          # (C, H, W) float32 in [0, 1]
    label: int
    mask: Optional[np.ndarray] = None  # (H, W) in {0, 1}

    def validate(self) -> None:
        if self.image.ndim != 3:
            raise ValueError(f"sample {self.id}: image must be (C, H, W), got shape {self.image.shape}")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"sample {self.id}: image values outside [0, 1] (min={lo}, max={hi})")
        if self.label < 0:
            raise ValueError(f"sample {self.id}: negative label {self.label}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[1:]:
                raise ValueError(
                    f"sample {self.id}: mask shape {self.mask.shape} does not match "
                    f"image spatial dims {self.image.shape[1:]}"
                )
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"sample {self.id}: mask contains values other than 0/1")


class Dataset:
    """An ordered collection of SampleRecords sharing one label space."""

    def __init__(self, samples: Sequence[SampleRecord], n_classes: Optional[int] = None):
        self.samples = list(samples)
        if n_classes is None:
            n_classes = (max(s.label for s in self.samples) + 1) if self.samples else 0
        self.n_classes = n_classes
        for s in self.samples:
            if s.label >= self.n_classes:
                raise ValueError(f"sample {s.id}: label {s.label} >= n_classes {self.n_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> SampleRecord:
        return self.samples[idx]

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def classes(self) -> list[int]:
        """Sorted distinct labels actually present."""
        return sorted({s.label for s in self.samples})

    def by_class(self) -> dict[int, list[SampleRecord]]:
        out: dict[int, list[SampleRecord]] = {}
        for s in self.samples:
            out.setdefault(s.label, []).append(s)
        return out

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], n_classes=self.n_classes)

    def validate(self) -> None:
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id}")
            seen.add(s.id)
            s.validate()


def stack_images(samples: Sequence[SampleRecord]) -> np.ndarray:
    """Stack sample images into one (B, C, H, W) float32 array."""
    if not samples:
        raise ValueError("empty sample list")
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)
