import numpy as np
import pytest
import torch

from dynsubspace.data import Dataset
from dynsubspace.model import EmbeddingNet
from dynsubspace.synthetic import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset() -> Dataset:
    """80 samples, 4 classes (2 colors x 2 shapes), 32x32 for speed."""
    spec = SyntheticSpec(n_samples=80, image_size=32, n_colors=2, n_shapes=2, blob_size=(8, 14))
    return generate_synthetic(spec, seed=7)


@pytest.fixture
def toy_model() -> EmbeddingNet:
    torch.manual_seed(0)
    return EmbeddingNet(d=16)
