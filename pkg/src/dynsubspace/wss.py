"""Attention maps as proxy pixel labels: thresholding, BCE training of a UNet segmenter.

The embedding model's attention maps are upsampled to input resolution,
binarized at a threshold chosen to maximize Dice on a held-out validation
sweep, and used as pseudo-labels to train an encoder-decoder segmenter.
"""
from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset, SampleRecord, stack_images
from .metrics import dice
from .model import EmbeddingNet

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
BCE_EPS = 1e-7


@dataclass
class AttentionMap:
    sample_id: str
    values: np.ndarray     # (m, n) float32 in (0, 1), feature resolution
    upsampled: np.ndarray  # (H, W) float32 in [0, 1], input resolution (bilinear)


@dataclass
class ProxyMask:
    sample_id: str
    mask: np.ndarray       # (H, W) uint8 in {0, 1}
    threshold_used: float


def extract_attention(
    model: EmbeddingNet, dataset: Dataset | Sequence[SampleRecord], batch_size: int = 64
) -> list[AttentionMap]:
    """One attention map per sample, with a bilinear upsampling to input resolution."""
    samples = list(dataset)
    maps: list[AttentionMap] = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                x = torch.from_numpy(stack_images(chunk))
                att = model(x).attention  # (B, m, n)
                up = F.interpolate(
                    att.unsqueeze(1), size=x.shape[2:], mode="bilinear", align_corners=False
                ).squeeze(1)
                up = up.clamp(0.0, 1.0)
                for s, a, u in zip(chunk, att, up):
                    maps.append(
                        AttentionMap(
                            sample_id=s.id,
                            values=a.numpy().astype(np.float32),
                            upsampled=u.numpy().astype(np.float32),
                        )
                    )
    finally:
        model.train(was_training)
    return maps


def binarize(maps: Sequence[AttentionMap], t_s: float) -> list[ProxyMask]:
    """Strictly-greater-than thresholding of the upsampled maps."""
    if not 0.0 < t_s < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t_s}")
    return [
        ProxyMask(sample_id=m.sample_id, mask=(m.upsampled > t_s).astype(np.uint8), threshold_used=t_s)
        for m in maps
    ]


def select_threshold(
    maps: Sequence[AttentionMap],
    gt_masks: Sequence[np.ndarray],
    grid: Sequence[float] = DEFAULT_GRID,
) -> float:
    """Grid value maximizing mean Dice of binarized maps against ground truth; ties go low."""
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    if len(maps) != len(gt_masks) or len(maps) == 0:
        raise ValueError(f"need matching non-empty maps/masks, got {len(maps)}/{len(gt_masks)}")
    best_t, best_score = None, -1.0
    for t in sorted(grid):
        proxies = binarize(maps, t)
        score = float(np.mean([dice(p.mask, gt) for p, gt in zip(proxies, gt_masks)]))
        if score > best_score:
            best_t, best_score = t, score
    return float(best_t)


def threshold_sweep(
    maps: Sequence[AttentionMap],
    gt_masks: Sequence[np.ndarray],
    grid: Sequence[float] = DEFAULT_GRID,
) -> dict[float, float]:
    """Mean Dice per grid threshold (the curve behind select_threshold)."""
    out = {}
    for t in sorted(grid):
        proxies = binarize(maps, t)
        out[float(t)] = float(np.mean([dice(p.mask, gt) for p, gt in zip(proxies, gt_masks)]))
    return out


def bce_loss(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over pixels, predictions clamped to [1e-7, 1 - 1e-7]."""
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(predictions.shape)} vs {tuple(targets.shape)}")
    p = predictions.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


class _ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNetSegmenter(nn.Module):
    """Small UNet: base width 32, two convs per block, three resolution levels.

    Outputs a per-pixel probability map in (0, 1) at input resolution.
    """

    def __init__(self, in_channels: int = 3, base_width: int = 32):
        super().__init__()
        w = base_width
        self.enc1 = _ConvBlock(in_channels, w)
        self.enc2 = _ConvBlock(w, 2 * w)
        self.bottom = _ConvBlock(2 * w, 4 * w)
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _ConvBlock(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _ConvBlock(2 * w, w)
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottom(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.head(d1)).squeeze(1)


def train_segmenter(
    images: Sequence[np.ndarray],
    proxy_masks: Sequence[np.ndarray],
    val_split: float = 0.15,
    epochs: int = 8,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> UNetSegmenter:
    """Train the UNet on (image, proxy mask) pairs; returns the best-val-Dice weights.

    The validation split is held out of training and scored against the same
    proxy masks (ground truth is not assumed here). With epochs=0 the freshly
    initialized network is returned.
    """
    if len(images) != len(proxy_masks) or len(images) == 0:
        raise ValueError(f"need matching non-empty images/masks, got {len(images)}/{len(proxy_masks)}")
    torch.manual_seed(seed)
    net = UNetSegmenter(in_channels=images[0].shape[0])
    if epochs == 0:
        return net
    masks_arr = np.stack([np.asarray(m, dtype=np.float32) for m in proxy_masks])
    if masks_arr.sum() == 0:
        warnings.warn("all proxy masks are empty; segmenter will learn the background class only",
                      RuntimeWarning, stacklevel=2)
    imgs_arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(imgs_arr))
    n_val = max(1, int(round(val_split * len(imgs_arr)))) if val_split > 0 and len(imgs_arr) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
    x_val = torch.from_numpy(imgs_arr[val_idx]) if n_val else None
    m_val = masks_arr[val_idx] if n_val else None

    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    best_state, best_dice = copy.deepcopy(net.state_dict()), -1.0
    for _ in range(epochs):
        net.train()
        perm = rng.permutation(len(train_idx))
        for start in range(0, len(perm), batch_size):
            idx = train_idx[perm[start:start + batch_size]]
            x = torch.from_numpy(imgs_arr[idx])
            t = torch.from_numpy(masks_arr[idx])
            pred = net(x)
            loss = bce_loss(pred, t)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        if x_val is not None:
            net.eval()
            with torch.no_grad():
                scores = []
                for start in range(0, len(x_val), batch_size):
                    pred = net(x_val[start:start + batch_size]).numpy() > 0.5
                    scores += [
                        dice(pred[i].astype(np.uint8), m_val[start + i].astype(np.uint8) > 0)
                        for i in range(pred.shape[0])
                    ]
                val_dice = float(np.mean(scores))
            if val_dice > best_dice:
                best_dice = val_dice
                best_state = copy.deepcopy(net.state_dict())
    if x_val is not None:  # without a val split, keep the final weights
        net.load_state_dict(best_state)
    return net


def segment(segmenter: UNetSegmenter, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask for one (C, H, W) image: probability map thresholded at `threshold`."""
    was_training = segmenter.training
    segmenter.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.asarray(image, dtype=np.float32)[None])
            prob = segmenter(x)[0].numpy()
    finally:
        segmenter.train(was_training)
    return (prob > threshold).astype(np.uint8)


def save_attention_png(maps: Sequence[AttentionMap], out_dir: str | Path) -> None:
    """16-bit grayscale PNGs (value = round(p * 65535)) plus a sidecar JSON index."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for m in maps:
        arr = np.round(m.upsampled.astype(np.float64) * 65535.0).astype(np.uint16)
        name = m.sample_id.replace("/", "__") + ".png"  # folder ids carry class prefixes
        Image.fromarray(arr).save(out / name)
        index.append({"id": m.sample_id, "file": name, "height": arr.shape[0], "width": arr.shape[1]})
    with open(out / "attention_index.json", "w") as f:
        json.dump(index, f, indent=1)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """8-bit PNG with foreground 255, background 0."""
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)
