"""Command-line entry points.

Verbs: synth-gen, train, eval, embed, attend, wss-threshold, wss-train, report.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    export_embeddings,
    prepare_data,
    run_experiment,
    run_single_seed,
    run_wss,
    summarize,
)
from .layout import SubspaceLayout
from .model import EmbeddingNet
from .trainer import TrainerConfig, TrainingState, train
from .wss import extract_attention, save_attention_png, select_threshold, threshold_sweep

logger = logging.getLogger(__name__)


def _load_model_checkpoint(path: str) -> tuple[EmbeddingNet, SubspaceLayout, TrainingState, TrainerConfig]:
    tensors, meta = load_checkpoint(path)
    info = meta["model"]
    model = EmbeddingNet(d=info["d"], in_channels=info.get("in_channels", 3))
    model.load_state_dict(tensors)
    layout = SubspaceLayout.from_dict(meta["layout"])
    state = TrainingState.from_dict(meta["state"])
    trainer_config = TrainerConfig.from_dict(meta["config"])
    return model, layout, state, trainer_config


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    trainer = config.trainer
    if getattr(args, "mode", None):
        trainer = dataclasses.replace(trainer, mode=args.mode)
    if getattr(args, "static_k", None) is not None:
        trainer = dataclasses.replace(trainer, static_k=args.static_k)
    config = dataclasses.replace(config, trainer=trainer)
    if getattr(args, "out", None):
        config = dataclasses.replace(config, output_dir=args.out)
    return config


def _pick_split(config: ExperimentConfig, seed: int, which: str):
    train_ds, val_ds, test_ds = prepare_data(config, seed)
    return {"train": train_ds, "val": val_ds, "test": test_ds}[which]


def cmd_synth_gen(args) -> int:
    from PIL import Image

    from .synthetic import generate_synthetic

    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seeds[0]
    spec = dataclasses.replace(config.data.synthetic, image_size=config.data.image_size)
    data = generate_synthetic(spec, seed)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in data:
        cdir = out / f"class{s.label:02d}"
        cdir.mkdir(exist_ok=True)
        img = (np.transpose(s.image, (1, 2, 0)) * 255).round().astype(np.uint8)
        Image.fromarray(img).save(cdir / f"{s.id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(out / "masks" / f"{s.id}.png")
    print(f"wrote {len(data)} samples ({spec.n_classes} classes) to {out}")
    return 0


def cmd_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    if args.resume:
        model, layout, state, trainer_config = _load_model_checkpoint(args.resume)
        seed = trainer_config.seed
        train_ds, val_ds, _ = prepare_data(config, seed)
        run_dir = Path(config.output_dir) / f"seed-{seed}"
        model, layout, state = train(
            trainer_config, train_ds, val_ds, model=model, out_dir=run_dir, state=state, layout=layout
        )
        print(f"resumed run finished at epoch {state.epoch}, K={layout.k}")
        return 0
    if args.seed is not None:
        run_dir = Path(config.output_dir) / f"seed-{args.seed}"
        result = run_single_seed(config, args.seed, run_dir)
        print(json.dumps(result, indent=1))
        return 0
    out = run_experiment(config)
    print(f"experiment complete: {out / 'summary.json'}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_checkpoint

    config = _apply_overrides(load_config(args.config), args)
    model, layout, _, trainer_config = _load_model_checkpoint(args.resume)
    seed = args.seed if args.seed is not None else trainer_config.seed
    test_ds = _pick_split(config, seed, args.split)
    report = evaluate_checkpoint(model, layout, test_ds, seed=seed)
    print(json.dumps(report.to_dict(), indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.append_jsonl(out / "results.jsonl")
    return 0


def cmd_embed(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    model, layout, _, trainer_config = _load_model_checkpoint(args.resume)
    seed = args.seed if args.seed is not None else trainer_config.seed
    data = _pick_split(config, seed, args.split)
    path = export_embeddings(model, layout, data, args.out)
    print(f"wrote {len(data)} x {model.embedding_dim} embeddings to {path}")
    return 0


def cmd_attend(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    model, _, _, trainer_config = _load_model_checkpoint(args.resume)
    seed = args.seed if args.seed is not None else trainer_config.seed
    data = _pick_split(config, seed, args.split)
    maps = extract_attention(model, data)
    save_attention_png(maps, args.out)
    print(f"wrote {len(maps)} attention maps to {args.out}")
    return 0


def cmd_wss_threshold(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    model, _, _, trainer_config = _load_model_checkpoint(args.resume)
    seed = args.seed if args.seed is not None else trainer_config.seed
    val_ds = _pick_split(config, seed, "val")
    with_masks = [s for s in val_ds if s.mask is not None]
    if not with_masks:
        raise ConfigError("validation split has no ground-truth masks; cannot sweep thresholds")
    maps = extract_attention(model, with_masks)
    gt = [s.mask for s in with_masks]
    sweep = threshold_sweep(maps, gt, config.wss.grid)
    t_s = select_threshold(maps, gt, config.wss.grid)
    print(json.dumps({"threshold": t_s, "sweep": {str(k): v for k, v in sweep.items()}}, indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "threshold.json", "w") as f:
            json.dump({"threshold": t_s, "sweep": {str(k): v for k, v in sweep.items()}}, f, indent=1)
    return 0


def cmd_wss_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    model, _, _, trainer_config = _load_model_checkpoint(args.resume)
    seed = args.seed if args.seed is not None else trainer_config.seed
    train_ds, val_ds, test_ds = prepare_data(config, seed)
    wss_config = config.wss
    if args.threshold is not None:
        wss_config = dataclasses.replace(wss_config, threshold=args.threshold)
    out_dir = Path(args.out) if args.out else None
    result = run_wss(model, train_ds, val_ds, test_ds, wss_config, seed, out_dir=out_dir)
    print(json.dumps({k: v for k, v in result.items() if k != "sweep"}, indent=1))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    results = []
    for result_file in sorted(out.glob("seed-*/result.json")):
        with open(result_file) as f:
            results.append(json.load(f))
    if not results:
        raise ConfigError(f"no seed-*/result.json files under {out}")
    for r in results:
        r["test"]["recall"] = {int(k): v for k, v in r["test"]["recall"].items()}
    summary = summarize(results, failures={})
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    print(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsubspace",
        description="Dynamic subspace metric learning: training, evaluation, and weak segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, *, config=True, resume=False, out_required=False, split=None,
            threshold=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--mode", choices=["dynamic", "static-K"], default=None)
        p.add_argument("--static-k", type=int, default=None, dest="static_k")
        p.add_argument("--out", required=out_required, default=None, help="output path")
        if resume:
            p.add_argument("--resume", required=name != "train", default=None, metavar="CHECKPOINT")
        if split:
            p.add_argument("--split", choices=["train", "val", "test"], default=split)
        if threshold:
            p.add_argument("--threshold", type=float, default=None)
        p.set_defaults(func=func)
        return p

    add("synth-gen", cmd_synth_gen, "generate a synthetic dataset as a folder of images",
        out_required=True)
    add("train", cmd_train, "train (all config seeds, or one with --seed; --resume continues a run)",
        resume=True)
    add("eval", cmd_eval, "evaluate a checkpoint on a data split", resume=True, split="test")
    add("embed", cmd_embed, "export embeddings for external projection", resume=True,
        out_required=True, split="test")
    add("attend", cmd_attend, "export attention maps as 16-bit PNGs", resume=True,
        out_required=True, split="test")
    add("wss-threshold", cmd_wss_threshold, "sweep the binarization threshold on validation Dice",
        resume=True)
    add("wss-train", cmd_wss_train, "train the segmenter on attention proxy labels", resume=True,
        threshold=True)

    p_report = sub.add_parser("report", help="aggregate seed runs into a mean/std summary")
    p_report.add_argument("--out", required=True, help="experiment directory with seed-*/ runs")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
