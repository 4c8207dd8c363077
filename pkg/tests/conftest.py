import numpy as np
import pytest

from scripts.data_generation.a1_1_synthetic_interactions_generator import generate_interactions
from scripts.dpfair.config import config_from_dict
from scripts.dpfair.data import Dataset, build_dataset

SMALL_SYNTHETIC = {
    "num_users": 40,
    "num_items": 120,
    "active_fraction": 0.2,
    "activity_ratio": 4.0,
    "inactive_interactions": 8,
    "num_clusters": 4,
    "in_cluster_prob": 0.8,
}


def small_config_dict(**sections) -> dict:
    """A config that trains and re-ranks in a couple of seconds."""
    raw = {
        "seed": 11,
        "synthetic": dict(SMALL_SYNTHETIC),
        "train": {"d": 8, "steps": 150, "expected_batch": 16, "learning_rate": 0.1, "log_every": 50},
        "privacy": {"epsilon": 2.0},
        "rerank": {"K": 8, "k": 4, "alpha": 0.01},
        "sweep": {"clip": [0.1, 1.0], "alpha": [0.05, 0.0]},
    }
    for name, values in sections.items():
        raw.setdefault(name, {})
        if isinstance(values, dict):
            raw[name].update(values)
        else:
            raw[name] = values
    return raw


@pytest.fixture
def small_config():
    return config_from_dict(small_config_dict())


@pytest.fixture(scope="session")
def synthetic_frame():
    return generate_interactions(**SMALL_SYNTHETIC, seed=5)


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_frame):
    dataset, rejected = build_dataset(synthetic_frame, seed=5, feedback="implicit")
    assert rejected == []
    return dataset


@pytest.fixture
def one_triple_dataset():
    """n1 = 2 users, n2 = 3 items, a single BPR triple (0, 1, 2)."""
    return Dataset(
        n1=2,
        n2=3,
        train_pos=np.array([[0, 1]]),
        val_pos=np.empty((0, 2), dtype=np.int64),
        test_pos=np.empty((0, 2), dtype=np.int64),
        negatives=np.array([2]),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
