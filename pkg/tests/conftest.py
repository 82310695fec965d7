"""Shared fixtures for dimemo tests."""

import numpy as np
import pytest

from config import reset_config
from corpus import SyntheticSpec, generate_synthetic

DIMEMO_ENV = {
    "DIMEMO_PRECISION": "f64",
    "DIMEMO_JOBS": "1",
    "DIMEMO_LOG_LEVEL": "INFO",
    "DIMEMO_LOG_TO_FILE": "false",
}


@pytest.fixture(autouse=True)
def pinned_env(monkeypatch):
    """Pin DIMEMO_* variables and start every test from a fresh config."""
    monkeypatch.delenv("DIMEMO_LEXICON_DIR", raising=False)
    for key, value in DIMEMO_ENV.items():
        monkeypatch.setenv(key, value)
    reset_config()
    yield
    reset_config()


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(seed=11, train=4, dev=2, test=2, mean_duration=20.0, min_duration=12.0, max_duration=30.0)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
