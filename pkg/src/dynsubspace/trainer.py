"""Training orchestration: plateau detection, learner splits, re-clustering, fine-tuning.

The loop grows the number of subspace learners on the fly. Data is K-means
clustered in the full embedding space every t_c epochs (and after every
split); each training step draws a batch from one cluster and optimizes that
learner's margin loss on its sub-embedding. When validation Recall@1 stops
improving for t_p epochs, the remainder coordinates are scored, the strongest
ones are committed as a new learner, and the leftover head rows are
reinitialized. The last `finetune_epochs` train the full concatenated
embedding on all data with the layout frozen.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .clustering import assign_groups, kmeans
from .data import Dataset, stack_images
from .layout import SubspaceLayout
from .losses import MarginLossParams, build_batch, learner_loss_batch
from .metrics import nmi, recall_at_k
from .model import EmbeddingNet, embed_dataset, reset_remainder
from .subspace import SplitRefused, score_neurons, split_learner

logger = logging.getLogger(__name__)

MODES = ("dynamic", "static-K")


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 1)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint is written when possible."""


@dataclass
class TrainerConfig:
    t_c: int = 2                 # re-cluster period in epochs
    t_p: int = 10                # plateau patience in epochs
    total_epochs: int = 60
    finetune_epochs: int = 10
    d: int = 32
    batch_size: int = 32
    per_class: int = 8
    score_threshold: float = 0.5
    min_remainder: int = 4
    lr: float = 1e-4
    seed: int = 0
    mode: str = "dynamic"
    static_k: int = 1
    alpha: float = 0.2
    beta: float = 1.2
    pair_policy: str = "anchor-random-negative"
    cluster_sampling: str = "round-robin"  # or "uniform", the literal pseudocode behaviour
    batches_per_epoch: Optional[int] = None  # default: ceil(N / batch_size)
    scoring_samples: int = 2048
    in_channels: int = 3

    def __post_init__(self):
        if self.t_c < 1:
            raise ConfigError(f"t_c must be >= 1, got {self.t_c}")
        if self.t_p < 1:
            raise ConfigError(f"t_p must be >= 1, got {self.t_p}")
        if not 0 <= self.finetune_epochs < self.total_epochs:
            raise ConfigError(
                f"finetune_epochs must satisfy 0 <= finetune_epochs < total_epochs, "
                f"got {self.finetune_epochs} / {self.total_epochs}"
            )
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError(f"score_threshold must be in (0, 1), got {self.score_threshold}")
        if self.min_remainder < 1:
            raise ConfigError(f"min_remainder must be >= 1, got {self.min_remainder}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "static-K" and not 1 <= self.static_k <= self.d:
            raise ConfigError(f"static_k must be in 1..d, got {self.static_k}")
        if self.batch_size % self.per_class != 0:
            raise ConfigError(
                f"batch_size ({self.batch_size}) must be divisible by per_class ({self.per_class})"
            )
        if self.d < 2:
            raise ConfigError(f"embedding size must be >= 2, got {self.d}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingState:
    epoch: int = 0
    k: int = 1
    best_score: float = float("-inf")
    best_epoch: int = 0
    last_event_epoch: int = 0
    recluster_flag: bool = True
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingState":
        return cls(**d)


def detect_plateau(state: TrainingState, t_p: int) -> bool:
    """True once t_p epochs have passed without a new best (or a structural event).

    The anchor is the later of best_epoch and last_event_epoch: adding a
    learner restarts the patience window, otherwise a saturated metric would
    trigger a split every following epoch.
    """
    return state.epoch >= max(state.best_epoch, state.last_event_epoch) + t_p


def should_recluster(epoch: int, t_c: int, event_flag: bool) -> bool:
    """True on the t_c schedule or when a structural event (new learner) just happened."""
    return epoch % t_c == 0 or event_flag


def _evaluate_split(
    model: EmbeddingNet, data: Dataset, seed: int, restarts: int = 3
) -> tuple[float, float]:
    """Validation NMI and Recall@1 on the full normalized embedding."""
    emb = embed_dataset(model, data)
    labels = data.labels()
    n_classes = len(np.unique(labels))
    best = None
    for r in range(restarts):
        res = kmeans(emb, n_classes, seed=seed + r, ids=data.ids())
        if best is None or res.inertia < best.inertia:
            best = res
    val_nmi = nmi(labels, best.labels_for(data.ids()))
    val_r1 = recall_at_k(emb, labels, 1) if len(data) > 1 else 0.0
    return val_nmi, val_r1


def _clear_head_moments(optimizer: torch.optim.Optimizer, model: EmbeddingNet, rows: list[int]) -> None:
    """Zero Adam moments for the given embedding-head rows (fresh moments for fresh weights)."""
    for p in (model.embed.weight, model.embed.bias):
        st = optimizer.state.get(p)
        if st:
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    st[key][rows] = 0.0


def _recluster(model: EmbeddingNet, data: Dataset, k: int, seed: int) -> list[Dataset]:
    emb = embed_dataset(model, data)
    assignment = kmeans(emb, k, seed=seed, ids=data.ids())
    return assign_groups(assignment, data)


class _HistoryWriter:
    def __init__(self, out_dir: Optional[Path]):
        self.path = out_dir / "history.jsonl" if out_dir is not None else None
        if self.path is not None and self.path.exists():
            self.path.unlink()

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def train(
    config: TrainerConfig,
    train_data: Dataset,
    val_data: Dataset,
    model: Optional[EmbeddingNet] = None,
    out_dir: Optional[str | Path] = None,
    state: Optional[TrainingState] = None,
    layout: Optional[SubspaceLayout] = None,
) -> tuple[EmbeddingNet, SubspaceLayout, TrainingState]:
    """Run the full training loop; returns the model, final layout, and state with history.

    `state`/`layout` (plus a matching `model`) resume a previous run from
    state.epoch + 1; optimizer moments start fresh on resume since checkpoints
    store only model tensors.
    """
    if len(train_data.classes()) < 2:
        raise ValueError("train_data must contain at least 2 classes")
    overlap = set(train_data.ids()) & set(val_data.ids())
    if overlap:
        raise ValueError(f"val_data overlaps train_data on {len(overlap)} sample ids")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    if model is None:
        model = EmbeddingNet(d=config.d, in_channels=config.in_channels)
    if model.embedding_dim != config.d:
        raise ConfigError(f"model embedding dim {model.embedding_dim} != config.d {config.d}")
    if layout is None:
        layout = (
            SubspaceLayout.initial(config.d)
            if config.mode == "dynamic"
            else SubspaceLayout.static_split(config.d, config.static_k)
        )
    layout.validate(config.d)
    if state is None:
        state = TrainingState(k=layout.k)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    history_writer = _HistoryWriter(out_path)
    for record in state.history:  # resumed history is preserved in the rewritten file
        history_writer.write(record)

    params = MarginLossParams(alpha=config.alpha, beta=config.beta)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    n_scoring = min(config.scoring_samples, len(train_data))
    scoring_idx = rng.choice(len(train_data), size=n_scoring, replace=False)
    scoring_subset = [train_data[int(i)] for i in scoring_idx]

    n_batches = config.batches_per_epoch or max(1, math.ceil(len(train_data) / config.batch_size))
    main_epochs = config.total_epochs - config.finetune_epochs
    groups: list[Dataset] = [train_data]
    config_dict = config.to_dict()
    model_info = {"d": config.d, "in_channels": config.in_channels, "backbone": "small-conv"}

    def _save(name: str) -> None:
        if out_path is not None:
            save_checkpoint(out_path / name, model, layout, state, config_dict, model_info)

    def _train_step(k_idx: int, batch) -> float:
        x = torch.from_numpy(stack_images(batch))
        out = model(x)
        bl = learner_loss_batch(
            out.embedding, [s.label for s in batch], layout, k_idx, params, config.pair_policy, rng
        )
        loss = bl.mean_active
        if not torch.isfinite(loss):
            _save("diagnostic_nan.ckpt")
            msg = f"non-finite loss at epoch {state.epoch + 1} (learner {k_idx})"
            if out_path is not None:
                msg += f"; diagnostic checkpoint at {out_path / 'diagnostic_nan.ckpt'}"
            raise TrainingDiverged(msg)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        return float(loss.detach())

    for ep in range(state.epoch + 1, main_epochs + 1):
        events = []
        if state.recluster_flag:
            groups = _recluster(model, train_data, layout.k, seed=int(rng.integers(2**31)))
            state.recluster_flag = False
            events.append("recluster")

        model.train()
        step_losses = []
        for b in range(n_batches):
            if config.cluster_sampling == "uniform":
                k_idx = int(rng.integers(1, layout.k + 1))
            else:
                k_idx = (b % layout.k) + 1
            group = groups[k_idx - 1] if k_idx - 1 < len(groups) else train_data
            if len(group) == 0:
                continue
            batch = build_batch(group, config.batch_size, config.per_class, rng)
            step_losses.append(_train_step(k_idx, batch))

        state.epoch = ep
        val_nmi, val_r1 = _evaluate_split(model, val_data, seed=int(rng.integers(2**31)))

        split_done = False
        if val_r1 > state.best_score:
            state.best_score = val_r1
            state.best_epoch = ep
            _save("best.ckpt")
        elif (
            config.mode == "dynamic"
            and detect_plateau(state, config.t_p)
            # an exhausted remainder can never split again; skip the scoring pass
            and len(layout.remainder) > config.min_remainder
        ):
            current_layout = layout
            scoring_rng = np.random.default_rng(int(rng.integers(2**31)))

            def score_loss(z, labels):
                return learner_loss_batch(
                    z, labels, current_layout, current_layout.k, params,
                    config.pair_policy, scoring_rng,
                ).mean_active

            scores = score_neurons(model, layout, scoring_subset, score_loss, config.batch_size)
            if scores.all_zero:
                logger.info("epoch %d: plateau but all neuron scores are zero; no split possible", ep)
            else:
                try:
                    layout = split_learner(scores, layout, config.min_remainder, config.score_threshold)
                except SplitRefused as e:
                    logger.info("epoch %d: %s; continuing without a split", ep, e)
                else:
                    layout.validate(config.d)
                    reset_remainder(model, layout, rng_seed=int(rng.integers(2**31)))
                    _clear_head_moments(optimizer, model, layout.remainder)
                    state.k = layout.k
                    state.last_event_epoch = ep
                    split_done = True
                    events.append("split")
                    logger.info("epoch %d: split -> K=%d, slice sizes %s", ep, layout.k, layout.sizes())
                    _save(f"split_epoch{ep:04d}.ckpt")

        if should_recluster(ep, config.t_c, split_done):
            state.recluster_flag = True

        record = {
            "epoch": ep,
            "K": layout.k,
            "slice_sizes": layout.sizes(),
            "train_loss": float(np.mean(step_losses)) if step_losses else 0.0,
            "val_nmi": val_nmi,
            "val_r1": val_r1,
            "event": "+".join(events) if events else None,
        }
        state.history.append(record)
        history_writer.write(record)

    # fine-tune the full embedding on all data, layout frozen
    finetune_start = state.epoch

    def on_finetune_epoch(i: int, mean_loss: float) -> None:
        ep = finetune_start + i
        state.epoch = ep
        val_nmi, val_r1 = _evaluate_split(model, val_data, seed=int(rng.integers(2**31)))
        if val_r1 > state.best_score:
            state.best_score = val_r1
            state.best_epoch = ep
            _save("best.ckpt")
        record = {
            "epoch": ep,
            "K": layout.k,
            "slice_sizes": layout.sizes(),
            "train_loss": mean_loss,
            "val_nmi": val_nmi,
            "val_r1": val_r1,
            "event": "finetune",
        }
        state.history.append(record)
        history_writer.write(record)

    finetune_epochs = config.total_epochs - state.epoch
    if finetune_epochs > 0:
        finetune_full(
            model,
            layout,
            train_data,
            epochs=finetune_epochs,
            lr=config.lr,
            params=params,
            batch_size=config.batch_size,
            per_class=config.per_class,
            policy=config.pair_policy,
            rng=rng,
            batches_per_epoch=config.batches_per_epoch,
            on_epoch=on_finetune_epoch,
        )

    _save("final.ckpt")
    return model, layout, state


def finetune_full(
    model: EmbeddingNet,
    layout: SubspaceLayout,
    data: Dataset,
    epochs: int,
    lr: float,
    *,
    params: Optional[MarginLossParams] = None,
    batch_size: int = 32,
    per_class: int = 8,
    policy: str = "anchor-random-negative",
    rng: Optional[np.random.Generator] = None,
    batches_per_epoch: Optional[int] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> EmbeddingNet:
    """Refine the full L2-normalized concatenated embedding on all data, no cluster routing.

    The layout is read-only here and `epochs=0` returns the model untouched.
    `on_epoch(i, mean_loss)` is called after each epoch (1-based).
    """
    if epochs == 0:
        return model
    if params is None:
        params = MarginLossParams()
    if rng is None:
        rng = np.random.default_rng(0)
    full_layout = SubspaceLayout.initial(model.embedding_dim)  # k=1 slice == whole embedding
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    n_batches = batches_per_epoch or max(1, math.ceil(len(data) / batch_size))
    model.train()
    for i in range(1, epochs + 1):
        step_losses = []
        for _ in range(n_batches):
            batch = build_batch(data, batch_size, per_class, rng)
            x = torch.from_numpy(stack_images(batch))
            out = model(x)
            bl = learner_loss_batch(
                out.embedding, [s.label for s in batch], full_layout, 1, params, policy, rng
            )
            loss = bl.mean_active
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in fine-tune epoch {i}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step_losses.append(float(loss.detach()))
        if on_epoch is not None:
            on_epoch(i, float(np.mean(step_losses)) if step_losses else 0.0)
    return model
