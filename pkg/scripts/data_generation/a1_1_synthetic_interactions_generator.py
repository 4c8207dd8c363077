"""
Synthetic implicit-feedback generator with skewed user activity.
Generates a user-item interaction log where a small share of users (the
"active" group) interacts several times more than everyone else, and users
prefer items of their own taste cluster so a latent factor model has signal.
"""

from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from faker import Faker
from prefect import flow, get_run_logger, task
from prefect.variables import Variable

from scripts.dpfair.config import data_dir
from scripts.utils.artifact_io import run_stamp as canonical_run_stamp
from scripts.utils.artifact_io import save_csv
from scripts.utils.seed_utils import derive_rng

# Load environment variables
load_dotenv()

INTERACTION_COLUMNS = ["user", "item", "value", "timestamp"]
MIN_USER_INTERACTIONS = 3
DAYS_BACK = 365


def generate_interactions(
    num_users: int = 300,
    num_items: int = 500,
    active_fraction: float = 0.2,
    activity_ratio: float = 5.0,
    inactive_interactions: int = 12,
    num_clusters: int = 8,
    in_cluster_prob: float = 0.8,
    seed: int = 42,
) -> pd.DataFrame:
    """Return a frame with columns user, item, value, timestamp (value is always 1)."""
    rng = derive_rng(seed, "synthetic")
    fake = Faker()
    fake.seed_instance(seed)

    user_keys = [f"u{i:05d}-{fake.user_name()}" for i in range(num_users)]
    item_keys = [f"i{j:05d}-{fake.ean8()}" for j in range(num_items)]

    user_cluster = rng.integers(0, num_clusters, size=num_users)
    item_cluster = rng.integers(0, num_clusters, size=num_items)
    # Zipf-like popularity within the catalogue
    popularity = 1.0 / np.arange(1, num_items + 1) ** 0.8
    popularity = popularity[rng.permutation(num_items)]

    n_active = max(1, int(round(active_fraction * num_users)))
    active = set(rng.choice(num_users, size=n_active, replace=False).tolist())
    cap = num_items - 1

    start_ts = int(datetime(2023, 1, 1, tzinfo=timezone.utc).timestamp())
    rows = []
    for u in range(num_users):
        mean = inactive_interactions * (activity_ratio if u in active else 1.0)
        count = int(np.clip(rng.poisson(mean), MIN_USER_INTERACTIONS, cap))
        in_cluster = item_cluster == user_cluster[u]
        weights = popularity * np.where(in_cluster, in_cluster_prob / max(1, in_cluster.sum()), 0.0)
        weights += popularity * (1.0 - in_cluster_prob) / num_items
        weights /= weights.sum()
        items = rng.choice(num_items, size=count, replace=False, p=weights)
        for j in np.sort(items):
            ts = start_ts + int(rng.integers(0, DAYS_BACK * 86400))
            rows.append((user_keys[u], item_keys[int(j)], 1.0, ts))
    return pd.DataFrame(rows, columns=INTERACTION_COLUMNS)


@task(name="Generate Synthetic Interactions")
def generate_interactions_task(**params) -> pd.DataFrame:
    logger = get_run_logger()
    df = generate_interactions(**params)
    counts = df.groupby("user").size()
    logger.info(f"Generated {len(df)} interactions for {df['user'].nunique()} users and {df['item'].nunique()} items")
    logger.info(f"Interactions per user: median={counts.median():.0f}, max={counts.max()}, min={counts.min()}")
    return df


@task(name="Save Interactions to CSV")
def save_interactions_csv(df: pd.DataFrame, run_stamp: Optional[str] = None) -> Path:
    out_path = data_dir() / f"interactions_synthetic_{canonical_run_stamp(run_stamp)}.csv"
    return save_csv(df, out_path, INTERACTION_COLUMNS)


@flow(name="1_Generate_Synthetic_Interactions")
def generate_synthetic_interactions_flow(
    num_users: int = 300,
    num_items: int = 500,
    active_fraction: float = 0.2,
    activity_ratio: float = 5.0,
    seed: int = 42,
    run_stamp: str | None = None,
):
    """Generate a skewed interaction log and save it under the data directory.
    Prefect Variables (synthetic_*) override the parameter defaults when set.
    """
    logger = get_run_logger()

    # Prefect variables override
    num_users = int(Variable.get("synthetic_num_users", default=num_users))
    num_items = int(Variable.get("synthetic_num_items", default=num_items))
    active_fraction = float(Variable.get("synthetic_active_fraction", default=active_fraction))
    activity_ratio = float(Variable.get("synthetic_activity_ratio", default=activity_ratio))

    logger.info(
        f"Using parameters: users={num_users}, items={num_items}, "
        f"active_fraction={active_fraction}, activity_ratio={activity_ratio}, seed={seed}"
    )

    try:
        logger.info("🚀 Starting synthetic interaction generation flow")
        df = generate_interactions_task(
            num_users=num_users,
            num_items=num_items,
            active_fraction=active_fraction,
            activity_ratio=activity_ratio,
            seed=seed,
        )
        path = save_interactions_csv(df, run_stamp)
        logger.info("✅ Synthetic interaction generation flow completed successfully")
        return {"path": str(path), "interactions": len(df), "users": int(df["user"].nunique())}
    except Exception as e:
        logger.error(f"❌ Flow failed: {e}")
        raise


if __name__ == "__main__":
    generate_synthetic_interactions_flow()
