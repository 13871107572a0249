import numpy as np
import pytest

from earlyexit import CalibrationConfig, build_model, calibrate, desk_config, load_corpus
from earlyexit.fixtures import corpus_path, make_rigged_bank


@pytest.fixture(scope="session")
def desk_model():
    return build_model(desk_config())


@pytest.fixture(scope="session")
def corpus_docs():
    return load_corpus(corpus_path())


@pytest.fixture(scope="session")
def rigged_bank(desk_model):
    """Deterministic bank: layer 7 always fires, 3 and 11 never do."""
    return make_rigged_bank(desk_model.config, hot_layers=(7,))


@pytest.fixture(scope="session")
def trained_bank(desk_model, corpus_docs):
    """A quickly calibrated bank for behavioral tests (not full-scale)."""
    config = CalibrationConfig(epochs=25, seed=11)
    return calibrate(desk_model, corpus_docs[:300], config)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))
