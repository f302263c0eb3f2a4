import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment (still part of the default run)")


@pytest.fixture(scope="session")
def object_scene():
    from mcc.experiments import synthetic_scene

    return synthetic_scene(0, n_views=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
