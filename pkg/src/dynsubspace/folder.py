"""Folder-of-images ingestion: one subdirectory per class, optional top-level masks dir."""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, SampleRecord

DEFAULT_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
MASK_DIR = "masks"
WORKERS_ENV = "DSL_NUM_WORKERS"


def _num_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            warnings.warn(f"ignoring non-integer {WORKERS_ENV}={env!r}", RuntimeWarning)
    return min(8, os.cpu_count() or 1)


def _load_image(path: Path, image_size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1))


def _load_mask(path: Path, image_size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L").resize((image_size, image_size), Image.NEAREST)
        arr = np.asarray(im)
    return (arr > 127).astype(np.uint8)


def load_image_folder(
    path: str | Path,
    extensions: Sequence[str] = DEFAULT_EXTENSIONS,
    split: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    image_size: int = 64,
) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test datasets from a folder with one subdirectory per class.

    A top-level `masks/` subdirectory, when present, supplies ground-truth
    masks matched to images by filename stem. Images are resized to
    `image_size` and scaled to [0, 1]; unreadable files are skipped with a
    warning, an empty class folder is an error. Decoding parallelism is
    capped by the DSL_NUM_WORKERS environment variable.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split}")
    extensions = tuple(e.lower() for e in extensions)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name != MASK_DIR)
    if not class_dirs:
        raise FileNotFoundError(f"{root} contains no class subdirectories")

    mask_index: dict[str, Path] = {}
    mask_dir = root / MASK_DIR
    if mask_dir.is_dir():
        for p in sorted(mask_dir.iterdir()):
            if p.suffix.lower() in extensions:
                mask_index[p.stem] = p

    jobs: list[tuple[Path, int, Optional[Path]]] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in extensions)
        if not files:
            raise ValueError(f"class folder {cdir} contains no images")
        jobs.extend((p, label, mask_index.get(p.stem)) for p in files)

    def load_one(job):
        p, label, mask_path = job
        try:
            image = _load_image(p, image_size)
        except Exception as e:  # unreadable file: skip, keep going
            warnings.warn(f"skipping unreadable image {p}: {e}", RuntimeWarning)
            return None
        mask = _load_mask(mask_path, image_size) if mask_path is not None else None
        return SampleRecord(id=f"{p.parent.name}/{p.stem}", image=image, label=label, mask=mask)

    with ThreadPoolExecutor(max_workers=_num_workers()) as pool:
        records = [r for r in pool.map(load_one, jobs) if r is not None]

    n_classes = len(class_dirs)
    rng = np.random.default_rng(seed)
    train: list[SampleRecord] = []
    val: list[SampleRecord] = []
    test: list[SampleRecord] = []
    by_label: dict[int, list[SampleRecord]] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    for label in sorted(by_label):
        group = by_label[label]
        order = rng.permutation(len(group))
        n = len(group)
        n_train = int(round(split[0] * n))
        n_val = int(round(split[1] * n))
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        for pos, idx in enumerate(order):
            target = train if pos < n_train else val if pos < n_train + n_val else test
            target.append(group[int(idx)])
    return (
        Dataset(train, n_classes=n_classes),
        Dataset(val, n_classes=n_classes),
        Dataset(test, n_classes=n_classes),
    )
