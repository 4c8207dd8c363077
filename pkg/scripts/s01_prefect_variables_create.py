#!/usr/bin/env python3
"""
Seed the Prefect Variables read by the DP-Fair flows.

Values come from the config defaults (configs/dp_fair.yml mirrors them):
- synthetic_* : generator sizes for generate_synthetic_interactions_flow
- sweep_*     : grids for hyperparameter_sweep_flow

Existing variables are left alone so edits made in the Prefect UI survive a rerun.
"""
import logging
import os

from dotenv import load_dotenv
from prefect.variables import Variable

from scripts.dpfair.config import DEFAULTS

load_dotenv()
if os.getenv("PREFECT_API_URL"):
    os.environ["PREFECT_API_URL"] = os.getenv("PREFECT_API_URL")

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
)
logger = logging.getLogger("dpfair-vars")


def default_variables() -> dict:
    synthetic, grids = DEFAULTS["synthetic"], DEFAULTS["sweep"]
    return {
        "synthetic_num_users": synthetic["num_users"],
        "synthetic_num_items": synthetic["num_items"],
        "synthetic_active_fraction": synthetic["active_fraction"],
        "synthetic_activity_ratio": synthetic["activity_ratio"],
        "sweep_clip_grid": list(grids["clip"]),
        "sweep_alpha_grid": list(grids["alpha"]),
    }


def create_prefect_variables(variables: dict | None = None) -> dict:
    """Set each variable that is not defined yet; returns {name: "set" | "skip"}."""
    outcome = {}
    for name, value in (variables if variables is not None else default_variables()).items():
        current = Variable.get(name, default=None)
        if current is not None:
            logger.info(f"⚠️ Skip {name}: already set to {current}")
            outcome[name] = "skip"
            continue
        Variable.set(name, value)
        logger.info(f"✅ Set {name}={value}")
        outcome[name] = "set"
    return outcome


if __name__ == "__main__":
    logger.info("🚀 Creating DP-Fair Prefect variables")
    result = create_prefect_variables()
    logger.info(f"🏁 Done ({sum(v == 'set' for v in result.values())} set, {sum(v == 'skip' for v in result.values())} skipped)")
