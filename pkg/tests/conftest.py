"""Shared fixtures: a small synthetic world reused across test modules."""

import numpy as np
import pytest

from edgelbs import dataset as ds


@pytest.fixture(scope="session")
def synth_world():
    """(log, meta, truth) for a 12-user / 24-POI / 6-cluster corpus."""
    spec = ds.SynthSpec(n_users=12, n_pois=24, n_clusters=6, seq_len=30)
    return ds.generate_synthetic(spec, seed=0)


@pytest.fixture(scope="session")
def synth_corpus(synth_world):
    log, meta, truth = synth_world
    return ds.split(log, (0.7, 0.2, 0.1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
