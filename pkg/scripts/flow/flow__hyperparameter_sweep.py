from typing import Optional

from prefect import flow, get_run_logger
from prefect.variables import Variable

from scripts.dpfair.config import artifact_dir
from scripts.dpfair.experiment import sweep
from scripts.flow.pipeline_common import load_experiment_config


@flow(name="flow__hyperparameter_sweep")
def hyperparameter_sweep_flow(
    config_path: Optional[str] = None,
    overrides: Optional[dict] = None,
    run_clip_sweep: bool = True,
    run_alpha_sweep: bool = True,
    artifact_root: Optional[str] = None,
):
    """
    Sweeps the clipping bound C and the fairness level alpha:

    1) clip sweep (retrains per grid point with C_u = C_v = C_w = C)
    2) alpha sweep (one trained model, re-ranked per grid point)

    Notes:
    - Each sweep runs independently so a failing sweep does not block the other.
    - Failed grid points are kept as rows with an error message.
    - Grids come from the config unless the Prefect variables sweep_clip_grid / sweep_alpha_grid are set.
    """
    logger = get_run_logger()
    logger.info("🚀 Starting hyperparameter sweep flow")

    config = load_experiment_config(config_path, overrides)
    root = artifact_root if artifact_root is not None else str(artifact_dir())

    # Prefect variables override
    clip_grid = Variable.get("sweep_clip_grid", default=list(config.sweep.clip))
    alpha_grid = Variable.get("sweep_alpha_grid", default=list(config.sweep.alpha))

    results = {"clip": None, "alpha": None}

    # 1) Clip bound sweep
    if run_clip_sweep:
        try:
            logger.info(f"▶️ Running clip sweep over {clip_grid}")
            table = sweep(config, "clip", [float(c) for c in clip_grid], artifact_root=root)
            results["clip"] = table.to_dict(orient="records")
            logger.info(f"✅ Completed clip sweep ({table['error'].notna().sum()} failed points)")
        except Exception as e:
            logger.error(f"❌ Clip sweep failed: {e}")
            results["clip"] = False

    # 2) Fairness level sweep
    if run_alpha_sweep:
        try:
            logger.info(f"▶️ Running alpha sweep over {alpha_grid}")
            table = sweep(config, "alpha", [float(a) for a in alpha_grid], artifact_root=root)
            results["alpha"] = table.to_dict(orient="records")
            logger.info(f"✅ Completed alpha sweep ({table['error'].notna().sum()} failed points)")
        except Exception as e:
            logger.error(f"❌ Alpha sweep failed: {e}")
            results["alpha"] = False

    logger.info("🏁 Hyperparameter sweep flow finished")
    return results


if __name__ == "__main__":
    hyperparameter_sweep_flow()
