import json
import zipfile

import numpy as np
import pytest
import torch

from dynsubspace.checkpoint import (
    load_checkpoint,
    load_tensor_archive,
    save_checkpoint,
    save_tensor_archive,
)
from dynsubspace.layout import SubspaceLayout
from dynsubspace.model import EmbeddingNet, embed_dataset
from dynsubspace.trainer import TrainingState


@pytest.fixture
def saved(tmp_path, toy_model):
    layout = SubspaceLayout.initial(16).commit([0, 1, 2])
    state = TrainingState(epoch=5, k=2, best_score=0.8, best_epoch=4)
    config = {"d": 16, "lr": 1e-4}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, toy_model, layout, state, config, {"d": 16, "in_channels": 3})
    return path, toy_model, layout, state


class TestArchiveFormat:
    def test_zip_with_manifest_and_blobs(self, saved):
        path, model, _, _ = saved
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            assert "manifest.json" in names
            manifest = json.loads(zf.read("manifest.json"))
            assert manifest["format"] == "dynsubspace-checkpoint"
            assert len(manifest["tensors"]) == len(model.state_dict())
            for entry in manifest["tensors"]:
                assert entry["dtype"] == "float32"
                assert entry["file"] in names
                blob = zf.read(entry["file"])
                assert len(blob) == 4 * int(np.prod(entry["shape"])) if entry["shape"] else 4

    def test_blobs_are_little_endian_float32(self, saved):
        path, model, _, _ = saved
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            entry = next(e for e in manifest["tensors"] if e["name"] == "embed.weight")
            raw = np.frombuffer(zf.read(entry["file"]), dtype="<f4").reshape(entry["shape"])
        assert np.array_equal(raw, model.embed.weight.detach().numpy())


class TestRoundTrip:
    def test_tensors_bitwise_identical(self, saved):
        path, model, _, _ = saved
        tensors, _ = load_tensor_archive(path)
        for name, t in model.state_dict().items():
            assert tensors[name].dtype == t.dtype, name
            assert torch.equal(tensors[name], t), name

    def test_integer_buffers_restore_dtype(self, saved):
        # batch-norm step counters are int64; stored as float32, restored exactly
        path, model, _, _ = saved
        tensors, _ = load_tensor_archive(path)
        counters = [n for n in tensors if n.endswith("num_batches_tracked")]
        assert counters
        for n in counters:
            assert tensors[n].dtype == torch.int64

    def test_meta_round_trip(self, saved):
        path, _, layout, state = saved
        _, meta = load_tensor_archive(path)
        assert meta["layout"] == layout.to_dict()
        assert meta["state"]["epoch"] == state.epoch
        assert meta["config"]["lr"] == 1e-4
        assert meta["model"]["d"] == 16

    def test_load_into_model_reproduces_embeddings(self, saved, tiny_dataset):
        path, model, _, _ = saved
        before = embed_dataset(model, tiny_dataset[:8])
        torch.manual_seed(999)
        other = EmbeddingNet(d=16)
        load_checkpoint(path, other)
        after = embed_dataset(other, tiny_dataset[:8])
        assert np.array_equal(before, after)

    def test_kind_checked(self, tmp_path):
        save_tensor_archive(tmp_path / "seg.ckpt", {"w": torch.zeros(2)}, {"kind": "segmenter"})
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "seg.ckpt")

    def test_non_checkpoint_zip_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("manifest.json", json.dumps({"format": "something-else"}))
        with pytest.raises(ValueError):
            load_tensor_archive(bad)

    def test_atomic_write_leaves_no_temp_on_success(self, saved, tmp_path):
        leftovers = list(tmp_path.glob("*.tmp"))
        assert leftovers == []
