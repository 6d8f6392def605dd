import numpy as np
import pytest

from ternforge.config import VitConfig
from ternforge.synthetic import generate_archive


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_config():
    """Small but structurally complete model: 2 blocks, 2 heads, LayerScale."""
    return VitConfig(depth=2, dim=32, heads=2, img_size=32, patch=8,
                     num_classes=13, use_layerscale=True)


@pytest.fixture(scope="session")
def mini_archive(mini_config):
    return generate_archive(mini_config, seed=777)


@pytest.fixture(scope="session")
def tiny_config():
    return VitConfig(depth=12, dim=192, heads=3, img_size=224, patch=16,
                     num_classes=1000)
