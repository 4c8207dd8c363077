from typing import Optional

from prefect import flow, get_run_logger

from scripts.flow.pipeline_common import (
    evaluate_task,
    ingest_task,
    load_experiment_config,
    recommend_task,
    rerank_task,
    resolve_run_dir,
    train_task,
)


@flow(name="flow__dp_fair_experiment")
def dp_fair_experiment_flow(
    config_path: Optional[str] = None,
    overrides: Optional[dict] = None,
    artifact_root: Optional[str] = None,
):
    """
    Runs one experiment end to end:

    1) ingest (raw log -> dataset bundle)
    2) train (DP-SGD, certified epsilon)
    3) recommend (top-K candidate lists)
    4) rerank (truncation baseline and fairness-constrained solution)
    5) evaluate (NDCG@k / F1@k per group, report.csv + manifest.json)

    Notes:
    - Stages depend on each other, so the first failure stops the flow.
    - All artifacts land in <artifact_root>/<config_hash[:12]>/.
    """
    logger = get_run_logger()
    logger.info("🚀 Starting DP-Fair experiment flow")

    try:
        config = load_experiment_config(config_path, overrides)
        out_dir = resolve_run_dir(config, artifact_root)

        logger.info("▶️ Stage: ingest")
        dataset = ingest_task(config, out_dir)
        logger.info("▶️ Stage: train")
        train_result = train_task(config, dataset, out_dir)
        logger.info("▶️ Stage: recommend")
        lists = recommend_task(config, train_result, dataset)
        logger.info("▶️ Stage: rerank")
        reranked = rerank_task(config, lists, dataset)
        logger.info("▶️ Stage: evaluate")
        reports = evaluate_task(config, dataset, train_result, lists, reranked, out_dir)
    except Exception as e:
        logger.error(f"❌ Experiment flow failed: {e}")
        raise

    logger.info(f"🏁 Experiment flow finished, artifacts in {out_dir}")
    return {
        "config_hash": config.hash,
        "run_dir": str(out_dir),
        "epsilon": train_result.privacy.epsilon,
        "rows": reports.to_dict(orient="records"),
    }


if __name__ == "__main__":
    dp_fair_experiment_flow()
