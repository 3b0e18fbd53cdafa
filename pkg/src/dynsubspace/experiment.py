"""Multi-seed experiment runner: data prep, training, evaluation, WSS, plots, summaries."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
import traceback
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .checkpoint import save_tensor_archive
from .data import Dataset
from .folder import load_image_folder
from .layout import SubspaceLayout
from .metrics import dice, evaluate_checkpoint
from .model import EmbeddingNet, embed_dataset
from .synthetic import generate_synthetic
from .trainer import train
from .wss import (
    binarize,
    extract_attention,
    select_threshold,
    threshold_sweep,
    train_segmenter,
    segment,
)

logger = logging.getLogger(__name__)

EMBED_MAGIC = b"EMB1"


def prepare_data(config: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Build (train, val, test) datasets for one run.

    Synthetic data is generated in one pass and sliced sequentially by the
    split fractions (samples are i.i.d., so slices are exchangeable); folder
    data is split stratified by class.
    """
    dc = config.data
    if dc.source == "folder":
        return load_image_folder(
            dc.folder.path, dc.folder.extensions, dc.split, seed=seed, image_size=dc.image_size
        )
    spec = dataclasses.replace(dc.synthetic, image_size=dc.image_size)
    full = generate_synthetic(spec, seed)
    n = len(full)
    n_train = int(round(dc.split[0] * n))
    n_val = int(round(dc.split[1] * n))
    train_ds = full.subset(range(n_train))
    val_ds = full.subset(range(n_train, n_train + n_val))
    test_ds = full.subset(range(n_train + n_val, n))
    return train_ds, val_ds, test_ds


def export_embeddings(model: EmbeddingNet, layout: SubspaceLayout, dataset: Dataset, path: str | Path) -> Path:
    """Write embeddings as binary rows plus an id/label sidecar CSV.

    File layout: magic b"EMB1", then uint32 little-endian N, d, n_slices,
    then n_slices uint32 slice sizes, then N*d little-endian float32 values
    in row-major order. The sidecar CSV at <path>.csv holds (row, id, label).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    emb = embed_dataset(model, dataset).astype("<f4")
    sizes = layout.sizes()
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<III", emb.shape[0], emb.shape[1], len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        f.write(emb.tobytes(order="C"))
    with open(path.with_suffix(path.suffix + ".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "id", "label"])
        for i, s in enumerate(dataset):
            w.writerow([i, s.id, s.label])
    return path


def read_embeddings(path: str | Path) -> tuple[np.ndarray, list[int]]:
    """Round-trip reader for export_embeddings; returns (vectors, slice_sizes)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBED_MAGIC:
            raise ValueError(f"{path} is not an embedding export (bad magic {magic!r})")
        n, d, n_slices = struct.unpack("<III", f.read(12))
        sizes = list(struct.unpack(f"<{n_slices}I", f.read(4 * n_slices)))
        data = np.frombuffer(f.read(4 * n * d), dtype="<f4").reshape(n, d)
    return data, sizes


def run_wss(
    model: EmbeddingNet,
    train_ds: Dataset,
    val_ds: Dataset,
    test_ds: Dataset,
    wss_config,
    seed: int,
    out_dir: Optional[Path] = None,
) -> dict:
    """Attention -> threshold sweep -> proxy masks -> segmenter; Dice before and after.

    Requires ground-truth masks on the validation and test sets (threshold
    selection and scoring); training proxies need no ground truth.
    """
    val_with_masks = [s for s in val_ds if s.mask is not None]
    test_with_masks = [s for s in test_ds if s.mask is not None]
    if not val_with_masks:
        raise ValueError("WSS threshold selection needs ground-truth masks on the validation set")

    val_maps = extract_attention(model, val_with_masks)
    val_gt = [s.mask for s in val_with_masks]
    sweep = threshold_sweep(val_maps, val_gt, wss_config.grid)
    t_s = wss_config.threshold if wss_config.threshold is not None else select_threshold(
        val_maps, val_gt, wss_config.grid
    )
    init_val_dice = sweep[min(sweep, key=lambda t: abs(t - t_s))]

    train_maps = extract_attention(model, train_ds)
    proxies = binarize(train_maps, t_s)
    segmenter = train_segmenter(
        images=[s.image for s in train_ds],
        proxy_masks=[p.mask for p in proxies],
        val_split=wss_config.val_split,
        epochs=wss_config.segmenter_epochs,
        lr=wss_config.segmenter_lr,
        batch_size=wss_config.segmenter_batch_size,
        seed=seed,
    )

    def scored(samples) -> float:
        scores = [dice(segment(segmenter, s.image), s.mask) for s in samples]
        return float(np.mean(scores)) if scores else float("nan")

    refined_val_dice = scored(val_with_masks)
    result = {
        "threshold": t_s,
        "sweep": {str(k): v for k, v in sweep.items()},
        "init_val_dice": init_val_dice,
        "refined_val_dice": refined_val_dice,
        "n_proxy_masks": len(proxies),
    }
    if test_with_masks:
        test_maps = extract_attention(model, test_with_masks)
        test_proxies = binarize(test_maps, t_s)
        result["init_test_dice"] = float(
            np.mean([dice(p.mask, s.mask) for p, s in zip(test_proxies, test_with_masks)])
        )
        result["refined_test_dice"] = scored(test_with_masks)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "wss.json", "w") as f:
            json.dump(result, f, indent=1)
        save_tensor_archive(
            out_dir / "segmenter.ckpt",
            segmenter.state_dict(),
            {"kind": "segmenter", "in_channels": train_ds[0].image.shape[0], "threshold": t_s},
        )
        _plot_sweep(sweep, t_s, out_dir / "dice_vs_threshold.png")
    return result


def run_single_seed(config: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    """Train, evaluate on the test split, optionally run the WSS pipeline."""
    run_dir.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds, test_ds = prepare_data(config, seed)
    trainer_config = dataclasses.replace(
        config.trainer, seed=seed, in_channels=train_ds[0].image.shape[0]
    )
    model, layout, state = train(trainer_config, train_ds, val_ds, out_dir=run_dir)
    report = evaluate_checkpoint(model, layout, test_ds, seed=seed)
    report.append_jsonl(run_dir / "results.jsonl")
    result = {
        "seed": seed,
        "final_k": layout.k,
        "slice_sizes": layout.sizes(),
        "test": report.to_dict(),
    }
    _plot_history(state.history, run_dir)
    if config.wss.enabled:
        result["wss"] = run_wss(model, train_ds, val_ds, test_ds, config.wss, seed, out_dir=run_dir)
    with open(run_dir / "result.json", "w") as f:
        json.dump(result, f, indent=1)
    return result


def summarize(results: list[dict], failures: dict[int, str]) -> dict:
    """Mean and std of the headline metrics across seed runs."""

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std()), "values": [float(v) for v in arr]}

    summary: dict = {"n_runs": len(results), "failed_seeds": failures}
    if results:
        summary["seeds"] = [r["seed"] for r in results]
        summary["nmi"] = stats([r["test"]["nmi"] for r in results])
        ks = sorted(results[0]["test"]["recall"])
        for k in ks:
            summary[f"recall@{k}"] = stats([r["test"]["recall"][k] for r in results])
        summary["final_k"] = stats([r["final_k"] for r in results])
        if all("wss" in r for r in results):
            summary["wss_init_val_dice"] = stats([r["wss"]["init_val_dice"] for r in results])
            summary["wss_refined_val_dice"] = stats([r["wss"]["refined_val_dice"] for r in results])
    return summary


def run_experiment(config: ExperimentConfig) -> Path:
    """Run every seed, then write summary.json with mean +- std across completed runs.

    A failing seed is recorded in the summary and does not stop the others.
    """
    from .config import save_config

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    results: list[dict] = []
    failures: dict[int, str] = {}
    for seed in config.seeds:
        run_dir = out / f"seed-{seed}"
        try:
            results.append(run_single_seed(config, seed, run_dir))
        except Exception as e:
            logger.exception("seed %d failed", seed)
            failures[seed] = f"{type(e).__name__}: {e}"
            (run_dir / "error.txt").parent.mkdir(parents=True, exist_ok=True)
            (run_dir / "error.txt").write_text(traceback.format_exc())
    summary = summarize(results, failures)
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    logger.info("experiment summary written to %s", out / "summary.json")
    return out


def _plot_history(history: list[dict], run_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not history:
        return
    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    axes[0, 0].plot(epochs, [h["train_loss"] for h in history])
    axes[0, 0].set_title("train loss")
    axes[0, 1].plot(epochs, [h["val_nmi"] for h in history])
    axes[0, 1].set_title("val NMI")
    axes[1, 0].plot(epochs, [h["val_r1"] for h in history])
    axes[1, 0].set_title("val R@1")
    axes[1, 1].step(epochs, [h["K"] for h in history], where="post")
    axes[1, 1].set_title("learners K")
    for ax in axes.flat:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(run_dir / "history.png", dpi=110)
    plt.close(fig)


def _plot_sweep(sweep: dict[float, float], chosen: float, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = sorted(sweep)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ts, [sweep[t] for t in ts], marker="o")
    ax.axvline(chosen, color="tab:red", linestyle="--", label=f"selected {chosen:.1f}")
    ax.set_xlabel("threshold")
    ax.set_ylabel("mean Dice of binarized maps")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
