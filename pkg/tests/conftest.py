import numpy as np
import pytest

from boldcausal.simgen import DatasetConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Twenty 3-ROI samples; shared read-only across tests."""
    return generate_dataset(DatasetConfig(n_samples=20, n_roi=3), base_seed=11)


@pytest.fixture(scope="session")
def dataset_file(tmp_path_factory, small_dataset):
    from boldcausal.io import write_container

    path = tmp_path_factory.mktemp("data") / "d.cmb"
    write_container(path, small_dataset, meta={"kind": "dataset"})
    return path
