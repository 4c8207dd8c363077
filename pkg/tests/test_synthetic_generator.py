import pandas as pd

from scripts.data_generation.a1_1_synthetic_interactions_generator import (
    INTERACTION_COLUMNS,
    MIN_USER_INTERACTIONS,
    generate_interactions,
)

from tests.conftest import SMALL_SYNTHETIC


def test_same_seed_same_log():
    a = generate_interactions(**SMALL_SYNTHETIC, seed=1)
    b = generate_interactions(**SMALL_SYNTHETIC, seed=1)
    pd.testing.assert_frame_equal(a, b)
    assert not a.equals(generate_interactions(**SMALL_SYNTHETIC, seed=2))


def test_log_layout(synthetic_frame):
    assert list(synthetic_frame.columns) == INTERACTION_COLUMNS
    assert (synthetic_frame["value"] == 1.0).all()
    assert not synthetic_frame.duplicated(["user", "item"]).any()
    assert synthetic_frame["user"].nunique() == SMALL_SYNTHETIC["num_users"]


def test_activity_is_skewed(synthetic_frame):
    counts = synthetic_frame.groupby("user").size().sort_values(ascending=False)
    n_active = round(SMALL_SYNTHETIC["active_fraction"] * SMALL_SYNTHETIC["num_users"])
    top, rest = counts.iloc[:n_active], counts.iloc[n_active:]
    assert top.mean() > 2.5 * rest.mean()
    assert counts.min() >= MIN_USER_INTERACTIONS
