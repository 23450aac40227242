import numpy as np
import pytest

from hallucinet.model import BranchConfig
from hallucinet.synthetic import SyntheticConfig, generate_synthetic

TINY_BLOCKS = ((8, 2), (16, 2), (24, 2))


@pytest.fixture(scope="session")
def tiny_config():
    """Three-block branch small enough for fast forward passes."""
    return BranchConfig(class_count=4, blocks=TINY_BLOCKS, tap_depth=2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small two-modality synthetic dataset shared across tests."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    cfg = SyntheticConfig(scene_count=8, size=128, class_count=4,
                          train_scenes=5, val_scenes=1)
    return generate_synthetic(11, cfg, root)


@pytest.fixture(scope="session")
def tiny_dataset_ir(tmp_path_factory):
    """Three-modality dataset for the multi-missing protocol."""
    root = tmp_path_factory.mktemp("tiny_dataset_ir")
    cfg = SyntheticConfig(scene_count=7, size=128, class_count=4,
                          train_scenes=4, val_scenes=1, include_ir=True)
    return generate_synthetic(13, cfg, root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
