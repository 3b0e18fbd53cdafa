import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from dynsubspace.metrics import dice
from dynsubspace.model import EmbeddingNet
from dynsubspace.synthetic import SyntheticSpec, generate_synthetic
from dynsubspace.wss import (
    AttentionMap,
    UNetSegmenter,
    bce_loss,
    binarize,
    extract_attention,
    save_attention_png,
    segment,
    select_threshold,
    threshold_sweep,
    train_segmenter,
)


class _FixedAttention(nn.Module):
    def __init__(self, grid):
        super().__init__()
        self.grid = torch.as_tensor(grid, dtype=torch.float32)

    def forward(self, s):
        b = s.shape[0]
        return self.grid.expand(b, 1, *self.grid.shape)


def _maps_from(values, upsampled=None):
    values = np.asarray(values, dtype=np.float32)
    up = values if upsampled is None else np.asarray(upsampled, dtype=np.float32)
    return [AttentionMap(sample_id="m0", values=values, upsampled=up)]


class TestExtractAttention:
    def test_constant_map_upsamples_to_constant(self, tiny_dataset):
        torch.manual_seed(0)
        model = EmbeddingNet(d=8)
        model.attention = _FixedAttention(np.full((2, 2), 0.7))
        maps = extract_attention(model, tiny_dataset[:5])
        assert len(maps) == 5
        for m in maps:
            assert m.upsampled.shape == (32, 32)
            assert np.allclose(m.upsampled, 0.7, atol=1e-6)
            assert np.allclose(m.values, 0.7)

    def test_checkerboard_maxpool_recovers_local_maxima(self, tiny_dataset):
        torch.manual_seed(0)
        grid = np.array([[0.8, 0.2], [0.2, 0.8]], dtype=np.float32)
        model = EmbeddingNet(d=8)
        model.attention = _FixedAttention(grid)
        m = extract_attention(model, tiny_dataset[:1])[0]
        cell = 32 // 2
        pooled = m.upsampled.reshape(2, cell, 2, cell).max(axis=(1, 3))
        assert np.allclose(pooled[grid == 0.8], 0.8, atol=1e-6)  # maxima recovered exactly
        assert (pooled >= grid - 1e-6).all()  # bilinear never loses a local max

    def test_one_map_per_sample_with_ids(self, toy_model, tiny_dataset):
        maps = extract_attention(toy_model, tiny_dataset)
        assert len(maps) == len(tiny_dataset)
        assert [m.sample_id for m in maps] == tiny_dataset.ids()
        for m in maps[:3]:
            assert 0.0 <= m.upsampled.min() and m.upsampled.max() <= 1.0


class TestBinarize:
    def test_strict_inequality_at_threshold(self):
        maps = _maps_from(np.full((4, 4), 0.5))
        out = binarize(maps, 0.5)
        assert (out[0].mask == 0).all()
        assert out[0].threshold_used == 0.5

    def test_near_zero_threshold_keeps_positive_pixels(self, rng):
        vals = rng.uniform(0.05, 0.95, size=(6, 6)).astype(np.float32)
        out = binarize(_maps_from(vals), 0.001)
        assert (out[0].mask == 1).all()

    def test_monotone_in_threshold(self, rng):
        vals = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
        maps = _maps_from(vals)
        prev = binarize(maps, 0.1)[0].mask
        for t in (0.3, 0.5, 0.7, 0.9):
            cur = binarize(maps, t)[0].mask
            assert (cur <= prev).all()  # raising the threshold never adds pixels
            prev = cur

    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            binarize(_maps_from(np.zeros((2, 2))), 1.0)


class TestSelectThreshold:
    def test_exact_maps_tie_break_low(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[1:3, 1:3] = 1
        maps = _maps_from(gt.astype(np.float32))
        assert select_threshold(maps, [gt]) == pytest.approx(0.1)

    def test_inverted_maps_match_hand_enumeration(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[:2] = 1
        inv = (1 - gt).astype(np.float32)
        maps = _maps_from(inv)
        grid = [round(0.1 * i, 1) for i in range(1, 10)]
        # independent exhaustive sweep
        best_t, best = None, -1.0
        for t in grid:
            d = dice((inv > t).astype(np.uint8), gt)
            if d > best:
                best_t, best = t, d
        assert select_threshold(maps, [gt], grid) == pytest.approx(best_t)

    def test_single_point_grid(self):
        gt = np.ones((2, 2), dtype=np.uint8)
        assert select_threshold(_maps_from(gt.astype(np.float32)), [gt], [0.5]) == 0.5

    def test_empty_grid_rejected(self):
        gt = np.ones((2, 2), dtype=np.uint8)
        with pytest.raises(ValueError):
            select_threshold(_maps_from(gt.astype(np.float32)), [gt], [])

    def test_selected_threshold_achieves_max(self, rng):
        maps = []
        gts = []
        for i in range(5):
            vals = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
            maps.append(AttentionMap(sample_id=f"s{i}", values=vals, upsampled=vals))
            gts.append((rng.uniform(0, 1, size=(8, 8)) > 0.6).astype(np.uint8))
        t = select_threshold(maps, gts)
        sweep = threshold_sweep(maps, gts)
        assert sweep[t] == pytest.approx(max(sweep.values()))


class TestBceLoss:
    def test_perfect_confident_prediction(self):
        pred = torch.ones(4, 4, dtype=torch.float64)
        target = torch.ones(4, 4, dtype=torch.float64)
        loss = float(bce_loss(pred, target))
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
        assert loss < 1.5e-7

    def test_uniform_half_is_ln2(self):
        loss = bce_loss(torch.full((3, 3), 0.5), torch.randint(0, 2, (3, 3)).float())
        assert float(loss) == pytest.approx(math.log(2), rel=1e-6)

    def test_matches_termwise_oracle(self, rng):
        p = rng.uniform(0.01, 0.99, size=(3, 3))
        t = (rng.uniform(size=(3, 3)) > 0.5).astype(np.float64)
        loss = bce_loss(torch.from_numpy(p), torch.from_numpy(t))
        expected = -np.mean([
            t[i, j] * math.log(p[i, j]) + (1 - t[i, j]) * math.log(1 - p[i, j])
            for i in range(3)
            for j in range(3)
        ])
        assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))

    def test_gradient_matches_finite_differences(self, rng):
        # 2x2 toy net: conv then sigmoid, checked in float64
        torch.manual_seed(0)
        conv = nn.Conv2d(1, 1, 1).double()
        x = torch.from_numpy(rng.normal(size=(2, 1, 2, 2)))
        target = torch.from_numpy((rng.uniform(size=(2, 2, 2)) > 0.5).astype(np.float64))

        def loss_of(w, b):
            pred = torch.sigmoid(nn.functional.conv2d(x, w, b)).squeeze(1)
            return bce_loss(pred, target)

        loss = loss_of(conv.weight, conv.bias)
        loss.backward()
        h = 1e-6
        for param, grad in ((conv.weight, conv.weight.grad), (conv.bias, conv.bias.grad)):
            flat = param.detach().flatten()
            for idx in range(flat.numel()):
                wp = param.detach().clone().flatten()
                wm = wp.clone()
                wp[idx] += h
                wm[idx] -= h
                args_p = (wp.reshape(param.shape), conv.bias.detach()) if param is conv.weight else (
                    conv.weight.detach(), wp.reshape(param.shape))
                args_m = (wm.reshape(param.shape), conv.bias.detach()) if param is conv.weight else (
                    conv.weight.detach(), wm.reshape(param.shape))
                fd = float((loss_of(*args_p) - loss_of(*args_m)) / (2 * h))
                an = float(grad.flatten()[idx])
                assert abs(an - fd) <= 1e-4 * max(abs(fd), abs(an), 1e-8)


class TestSegmenter:
    def test_output_shape_and_range(self):
        torch.manual_seed(0)
        net = UNetSegmenter()
        out = net(torch.rand(2, 3, 32, 32))
        assert out.shape == (2, 32, 32)
        assert (out > 0).all() and (out < 1).all()

    def test_zero_epochs_returns_fresh_net(self):
        imgs = [np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)]
        masks = [np.ones((16, 16), dtype=np.uint8)]
        got = train_segmenter(imgs, masks, epochs=0, seed=11)
        torch.manual_seed(11)
        fresh = UNetSegmenter(in_channels=3)
        for k, v in got.state_dict().items():
            assert torch.equal(v, fresh.state_dict()[k])

    def test_all_empty_masks_warn_but_train(self):
        rng = np.random.default_rng(0)
        imgs = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(8)]
        masks = [np.zeros((16, 16), dtype=np.uint8) for _ in range(8)]
        with pytest.warns(RuntimeWarning):
            net = train_segmenter(imgs, masks, epochs=1, batch_size=4, seed=0)
        assert isinstance(net, UNetSegmenter)

    def test_degenerate_background_training_predicts_empty(self):
        rng = np.random.default_rng(1)
        imgs = [rng.random((3, 16, 16)).astype(np.float32) * 0.2 for _ in range(12)]
        masks = [np.zeros((16, 16), dtype=np.uint8) for _ in range(12)]
        with pytest.warns(RuntimeWarning):
            net = train_segmenter(imgs, masks, epochs=3, batch_size=4, seed=0)
        fg = np.mean([segment(net, im).mean() for im in imgs])
        assert fg < 0.01

    def test_no_val_split_keeps_trained_weights(self):
        rng = np.random.default_rng(3)
        imgs = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(6)]
        masks = [np.ones((16, 16), dtype=np.uint8) for _ in range(6)]
        net = train_segmenter(imgs, masks, val_split=0.0, epochs=2, batch_size=4, seed=7)
        torch.manual_seed(7)
        fresh = UNetSegmenter(in_channels=3)
        changed = any(
            not torch.equal(v, fresh.state_dict()[k]) for k, v in net.state_dict().items()
        )
        assert changed, "training with val_split=0 must not return the initial weights"

    def test_segment_deterministic_and_shaped(self, rng):
        torch.manual_seed(0)
        net = UNetSegmenter()
        img = rng.random((3, 32, 32)).astype(np.float32)
        a = segment(net, img)
        b = segment(net, img)
        assert np.array_equal(a, b)
        assert a.shape == (32, 32)
        assert set(np.unique(a)) <= {0, 1}

    def test_supervised_blobs_reach_high_dice(self):
        # training on ground-truth masks = the fully-supervised upper-bound setup
        spec = SyntheticSpec(n_samples=160, image_size=32, n_colors=2, n_shapes=2, blob_size=(8, 14))
        data = generate_synthetic(spec, seed=5)
        net = train_segmenter(
            [s.image for s in data],
            [s.mask for s in data],
            val_split=0.2,
            epochs=6,
            batch_size=16,
            seed=0,
        )
        scores = [dice(segment(net, s.image), s.mask) for s in list(data)[:40]]
        assert float(np.mean(scores)) >= 0.9


def test_attention_png_round_trip(tmp_path, rng):
    from PIL import Image

    vals = rng.uniform(0, 1, size=(16, 16)).astype(np.float32)
    maps = [AttentionMap(sample_id="a1", values=vals[:4, :4], upsampled=vals)]
    save_attention_png(maps, tmp_path)
    arr = np.asarray(Image.open(tmp_path / "a1.png"))
    assert arr.dtype == np.uint16 or arr.dtype == np.int32
    assert np.allclose(arr / 65535.0, vals, atol=1.0 / 65535)
    assert (tmp_path / "attention_index.json").exists()


def test_attention_png_folder_style_ids(tmp_path, rng):
    # folder-dataset ids look like "class/stem"; filenames must stay flat
    import json

    vals = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
    maps = [AttentionMap(sample_id="melanoma/img_01", values=vals, upsampled=vals)]
    save_attention_png(maps, tmp_path)
    assert (tmp_path / "melanoma__img_01.png").exists()
    index = json.loads((tmp_path / "attention_index.json").read_text())
    assert index[0]["id"] == "melanoma/img_01"
