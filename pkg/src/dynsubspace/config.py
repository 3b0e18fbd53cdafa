"""Experiment configuration: YAML round-trip for data, trainer, and WSS settings."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .synthetic import SyntheticSpec
from .trainer import ConfigError, TrainerConfig
from .wss import DEFAULT_GRID


@dataclass
class FolderDataConfig:
    path: Optional[str] = None
    extensions: list[str] = field(default_factory=lambda: [".png", ".jpg", ".jpeg"])


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "folder"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    folder: FolderDataConfig = field(default_factory=FolderDataConfig)
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)  # train/val/test fractions
    image_size: int = 64

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError(f"data source must be 'synthetic' or 'folder', got {self.source!r}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.split}")
        if self.source == "folder" and not self.folder.path:
            raise ConfigError("data source 'folder' requires folder.path")


@dataclass
class WssConfig:
    enabled: bool = False
    grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    segmenter_epochs: int = 8
    segmenter_lr: float = 1e-3
    segmenter_batch_size: int = 16
    val_split: float = 0.15
    threshold: Optional[float] = None  # None: pick by the validation Dice sweep

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("wss grid must be non-empty")
        if self.threshold is not None and not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"wss threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 <= self.val_split < 1.0:
            raise ConfigError(f"wss val_split must be in [0, 1), got {self.val_split}")


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/experiment"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    wss: WssConfig = field(default_factory=WssConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds list must be non-empty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, mapping: dict, path: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in mapping.items():
        if name == "synthetic":
            kwargs[name] = _build(SyntheticSpec, value, f"{path}.{name}")
        elif name == "folder" and isinstance(value, dict):
            kwargs[name] = _build(FolderDataConfig, value, f"{path}.{name}")
        elif name == "data":
            kwargs[name] = _build(DataConfig, value, f"{path}.{name}")
        elif name == "trainer":
            kwargs[name] = _build(TrainerConfig, value, f"{path}.{name}")
        elif name == "wss":
            kwargs[name] = _build(WssConfig, value, f"{path}.{name}")
        elif name in ("split", "blob_size") and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path}: {e}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a YAML experiment config; unknown or invalid keys raise ConfigError."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    with open(p) as f:
        raw = yaml.safe_load(f) or {}
    return _build(ExperimentConfig, raw, "config")


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False, allow_unicode=True)
