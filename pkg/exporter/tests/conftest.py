import pytest
import torch

from tfexport.deit import random_deit
from tfexport.wire import ModelConfig


@pytest.fixture(scope="session")
def small_config():
    """Reduced-depth config so checkpoint tests stay fast."""
    return ModelConfig(depth=2, dim=64, heads=2, patch=8, img_size=32,
                       num_classes=17)


@pytest.fixture(scope="session")
def small_config_ls():
    return ModelConfig(depth=2, dim=64, heads=2, patch=8, img_size=32,
                       num_classes=17, use_layerscale=True)


@pytest.fixture(scope="session")
def small_ckpt(small_config, tmp_path_factory):
    model = random_deit(small_config, seed=11)
    path = tmp_path_factory.mktemp("ckpt") / "small.pth"
    torch.save(model.state_dict(), path)
    return path, model


def register_config(name, config):
    from tfexport import wire
    wire.CONFIGS[name] = config


@pytest.fixture(scope="session", autouse=True)
def _register_test_configs(small_config, small_config_ls):
    register_config("test_small", small_config)
    register_config("test_small_ls", small_config_ls)
