import numpy as np
import pytest
from hypothesis import settings

from cems_forge.geometry import GlobalConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def cfg():
    return GlobalConfig()


@pytest.fixture
def lam(cfg):
    return cfg.wavelength_m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
