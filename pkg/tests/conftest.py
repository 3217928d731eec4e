import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from layerscene.autodiff import precision
from layerscene.model import init_params, tiny_config

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny():
    """Tiny 64-bit model: 16x16 images, 8x8 canvases, two slots."""
    cfg = tiny_config()
    return cfg, init_params(cfg, seed=3, dtype=np.float64)
