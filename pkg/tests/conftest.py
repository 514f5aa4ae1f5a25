import numpy as np
import pytest

from tinycd import Tensor
from tinycd.data import SyntheticSpec, generate_synthetic, load_dataset
from tinycd.model import ModelConfig, TinyCDModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand64(rng, shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


@pytest.fixture
def tiny_config():
    return ModelConfig(backbone_widths=(4, 6), backbone_strides=(2, 2), mamb_hidden_layers=1)


@pytest.fixture
def tiny_model(tiny_config):
    return TinyCDModel(tiny_config, seed=0)


@pytest.fixture(scope="session")
def small_dataset_root(tmp_path_factory):
    """16 train / 8 val / 8 test pairs at 32x32, shared across tests."""
    root = tmp_path_factory.mktemp("synth")
    for split, count in (("train", 16), ("val", 8), ("test", 8)):
        generate_synthetic(SyntheticSpec(count=count, size=32, seed=11), root, split)
    return root


@pytest.fixture(scope="session")
def small_train_ds(small_dataset_root):
    return load_dataset(small_dataset_root, "train")
