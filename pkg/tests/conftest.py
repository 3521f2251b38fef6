import pytest

from cotrec.gateway import DiskCache, Gateway, MockBackend
from cotrec.synth import cluster_dataset


@pytest.fixture
def gateway(tmp_path):
    return Gateway(MockBackend(seed=0, dim=32), DiskCache(tmp_path / "cache"), record=True)


@pytest.fixture
def small_dataset():
    return cluster_dataset(n_users=24, n_clusters=3, items_per_cluster=8, length=7, seed=1)
