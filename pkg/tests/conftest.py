import warnings

import numpy as np
import pytest

from dmhash.data import SyntheticConfig, generate_synthetic, make_semi_paired


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticConfig(n_total=120, d1=12, d2=10, d_latent=4, n_clusters=3, seed=7))


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return make_semi_paired(small_dataset, 0.5, seed=7)


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield
