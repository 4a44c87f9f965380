import numpy as np
import pytest

from ngpsr.data import synth_scene
from ngpsr.model import ViewCache
from ngpsr.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_scene():
    return synth_scene(seed=0, n_views=8, hr_size=16, scale=2)


@pytest.fixture(scope="session")
def tiny_cache(tiny_scene):
    return ViewCache(tiny_scene, 4)


@pytest.fixture(scope="session")
def tiny_trained(tiny_cache):
    """A full model after a short run on the 16x16 scene; shared by post-training checks."""
    config = TrainConfig(steps=150, batch_size=256, seed=0)
    return train(tiny_cache, config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
