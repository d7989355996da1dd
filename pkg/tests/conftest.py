import logging
from pathlib import Path

import numpy as np
import pytest
import torch

from sideshill.data import Dataset, RatingMatrix, SideFeatureTable, load_dataset

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k"

logging.getLogger("sideshill").setLevel(logging.INFO)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks on ML-100K")


@pytest.fixture(scope="session")
def ml100k():
    if not (ML100K / "u.data").exists():
        pytest.skip("ML-100K not present; run tools/fetch_ml100k.py")
    return load_dataset(ML100K)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def make_dataset(R, user_dim=3, item_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    R = np.asarray(R)
    return Dataset(RatingMatrix.from_dense(R),
                   SideFeatureTable(rng.random((R.shape[0], user_dim))),
                   SideFeatureTable(rng.random((R.shape[1], item_dim))))


@pytest.fixture
def toy():
    """20 users x 12 items, about 40% dense, with side features."""
    rng = np.random.default_rng(7)
    R = rng.integers(1, 6, size=(20, 12)) * (rng.random((20, 12)) < 0.4)
    R[:, 0] = 0
    R[:5, 0] = [5, 4, 5, 3, 4]
    return make_dataset(R)
