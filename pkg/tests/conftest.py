import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    from sparse_shield.synthetic import write_fixture_corpus

    root = tmp_path_factory.mktemp("corpus")
    return write_fixture_corpus(root, n_train=40, n_eval=20, seed=0)


@pytest.fixture(scope="session")
def bundle_dir(fixture_corpus, tmp_path_factory):
    from sparse_shield.cli import main

    out = tmp_path_factory.mktemp("bundle")
    code = main([
        "learn", str(fixture_corpus["train"]), str(out),
        "--features", str(fixture_corpus["features"]),
        "--config", str(fixture_corpus["config"]),
    ])
    assert code == 0
    return out
