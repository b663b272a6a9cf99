import os

import numpy as np
import pytest

from socprob.synthetic import make_scene, write_benchmark


def pytest_addoption(parser):
    parser.addoption("--data", default=None, help="ETH/UCY benchmark directory (default: $SOCPROB_DATA)")


@pytest.fixture(scope="session")
def data_dir(request):
    return request.config.getoption("--data") or os.environ.get("SOCPROB_DATA")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene("zara1", n_peds=12, n_frames=60, seed=3)


@pytest.fixture(scope="session")
def synthetic_benchmark(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    write_benchmark(d, n_peds=10, n_frames=50, seed=1)
    return d
