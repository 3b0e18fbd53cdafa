"""Embedding network: backbone features, spatial attention, attentive pooling, embedding head."""
from __future__ import annotations

import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import Dataset, SampleRecord, stack_images
from .layout import SubspaceLayout, normalize_embedding


class ForwardOutput(NamedTuple):
    features: torch.Tensor   # (B, c, m, n)
    attention: torch.Tensor  # (B, m, n), values in (0, 1)
    embedding: torch.Tensor  # (B, d)


def build_attention_module(c_in: int) -> nn.Sequential:
    """Three 3x3 convs with channels c_in -> 128 -> 32 -> 1, ReLU between, sigmoid last.

    Padding 1 preserves the spatial dims, so the module maps (B, c_in, m, n)
    to a (B, 1, m, n) map with values strictly in (0, 1).
    """
    if c_in < 1:
        raise ValueError(f"c_in must be >= 1, got {c_in}")
    return nn.Sequential(
        nn.Conv2d(c_in, 128, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(128, 32, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(32, 1, kernel_size=3, padding=1),
        nn.Sigmoid(),
    )


class SmallConvExtractor(nn.Module):
    """Desk-scale backbone: four stride-2 conv blocks, 3 -> 32 -> 64 -> 128 -> 128.

    Total downsampling is 16x, so 64x64 inputs give 4x4 feature maps. Any
    module with an `out_channels` attribute that maps (B, C, H, W) to
    (B, c, m, n) can stand in for it.
    """

    out_channels = 128

    def __init__(self, in_channels: int = 3):
        super().__init__()
        widths = [32, 64, 128, 128]
        blocks = []
        prev = in_channels
        for w in widths:
            blocks += [
                nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            prev = w
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


def init_linear_rows(linear: nn.Linear, rows: Sequence[int], generator: Optional[torch.Generator] = None) -> None:
    """Re-draw the given output rows (weights and bias) with uniform fan-in scaling.

    Draws U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the same scheme used at build
    time, so a reset row is statistically indistinguishable from a fresh one.
    Rows not listed are left bit-identical.
    """
    rows = sorted(rows)
    fan_in = linear.in_features
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        w = torch.empty(len(rows), fan_in, dtype=linear.weight.dtype)
        w.uniform_(-bound, bound, generator=generator)
        linear.weight[rows] = w
        if linear.bias is not None:
            b = torch.empty(len(rows), dtype=linear.bias.dtype)
            b.uniform_(-bound, bound, generator=generator)
            linear.bias[rows] = b


class EmbeddingNet(nn.Module):
    """Backbone -> attention -> attentive GAP -> linear head to a d-dim embedding.

    The attention map multiplies every feature channel before global average
    pooling, so the pooled c-vector is GAP(attention * features). The returned
    embedding tensor participates in autograd: callers that need per-sample
    gradients at the embedding layer (e.g. neuron scoring) can retain_grad()
    on it and read .grad after backward.
    """

    def __init__(self, d: int = 128, in_channels: int = 3, feature_extractor: Optional[nn.Module] = None):
        super().__init__()
        if d < 1:
            raise ValueError(f"embedding size must be >= 1, got {d}")
        self.features = feature_extractor if feature_extractor is not None else SmallConvExtractor(in_channels)
        self.in_channels = in_channels
        c = self.features.out_channels
        self.attention = build_attention_module(c)
        self.embed = nn.Linear(c, d)
        self.embedding_dim = d
        init_linear_rows(self.embed, range(d))

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.ndim != 4:
            raise ValueError(f"expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"model expects {self.in_channels} input channels, got {x.shape[1]}")
        s = self.features(x)
        a = self.attention(s).squeeze(1)          # (B, m, n)
        pooled = (a.unsqueeze(1) * s).mean(dim=(2, 3))
        z = self.embed(pooled)
        return ForwardOutput(features=s, attention=a, embedding=z)


def reset_remainder(model: EmbeddingNet, layout: SubspaceLayout, rng_seed: int) -> None:
    """Re-initialize the embedding-head rows that produce the remainder coordinates.

    Uses the build-time init scheme with a dedicated generator, so two resets
    with the same seed produce identical remainder weights and all other rows
    are untouched.
    """
    if not layout.remainder:
        raise ValueError("layout has an empty remainder")
    gen = torch.Generator()
    gen.manual_seed(int(rng_seed))
    init_linear_rows(model.embed, layout.remainder, generator=gen)


@torch.no_grad()
def embed_dataset(model: EmbeddingNet, data: Dataset | Sequence[SampleRecord], batch_size: int = 128) -> np.ndarray:
    """Full L2-normalized embeddings for every sample, as an (N, d) float32 array.

    Runs in eval mode (batch-norm uses running stats) and restores the
    previous mode afterwards.
    """
    samples = list(data)
    was_training = model.training
    model.eval()
    try:
        out = []
        for start in range(0, len(samples), batch_size):
            x = torch.from_numpy(stack_images(samples[start:start + batch_size]))
            z = model(x).embedding
            out.append(normalize_embedding(z).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)
