"""Shared fixtures: the synthetic dataset is expensive enough to build once."""

import numpy as np
import pytest

from fieldsim import oracle
import fieldsim.train as ftrain


@pytest.fixture(scope="session")
def dataset():
    """The standard 16-frame synthetic log (images + sweeps + tracklets)."""
    return oracle.standard_dataset()


@pytest.fixture(scope="session")
def tiny_dataset():
    """A 4-frame log for cheap end-to-end paths."""
    return oracle.standard_dataset(n_frames=4)


@pytest.fixture(scope="session")
def graph(dataset):
    """Untrained scene graph over the standard dataset (read-only tests)."""
    return ftrain.build_graph(dataset, seed=0)


@pytest.fixture()
def fresh_graph(dataset):
    """A graph private to one test; safe to edit or optimize."""
    return ftrain.build_graph(dataset, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
