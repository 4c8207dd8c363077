"""
Common tasks for the DP-Fair experiment flows.
- Resolves the experiment config (YAML file + overrides)
- Wraps each experiment stage as a Prefect task
- Writes every artifact under <artifact_dir>/<config_hash[:12]>/
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import pandas as pd
from dotenv import load_dotenv
from prefect import get_run_logger, task
from prefect.cache_policies import NONE

from scripts.dpfair.config import ExperimentConfig, artifact_dir, load_config
from scripts.dpfair.data import Dataset, dataset_stats, group_users, save_bundle
from scripts.dpfair.experiment import (
    ExperimentResult,
    certify,
    evaluate,
    ingest,
    new_manifest,
    recommend,
    rerank,
    run_dir,
    save_run,
    train_model,
)
from scripts.dpfair.train import RecLists, TrainResult

# Load envs
load_dotenv()


def resolve_run_dir(config: ExperimentConfig, artifact_root: Optional[Union[str, Path]] = None) -> Path:
    return run_dir(config, artifact_root if artifact_root is not None else artifact_dir())


@task(name="Load Experiment Config", cache_policy=NONE)
def load_experiment_config(config_path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    logger = get_run_logger()
    config = load_config(config_path, overrides)
    logger.info(
        f"Loaded config {config.hash[:12]}: dataset={config.dataset.name}, scorer={config.train.scorer}, "
        f"epsilon={config.epsilon}, alpha={config.rerank.alpha}"
    )
    return config


@task(name="Ingest Interactions", cache_policy=NONE)
def ingest_task(config: ExperimentConfig, out_dir: Path) -> Dataset:
    logger = get_run_logger()
    dataset, rejected = ingest(config)
    if rejected:
        logger.warning(f"⚠️ {len(rejected)} raw rows rejected during ingestion")
    save_bundle(dataset, Path(out_dir) / "bundle")
    stats = dataset_stats(dataset)
    logger.info(f"Dataset: {stats.n1} users, {stats.n2} items, sparsity {stats.sparsity:.2f}%")
    return dataset


@task(name="Train DP-SGD Model", cache_policy=NONE)
def train_task(config: ExperimentConfig, dataset: Dataset, out_dir: Path) -> TrainResult:
    logger = get_run_logger()
    result = train_model(config, dataset, checkpoint_dir=Path(out_dir) / "checkpoints")
    logger.info(
        f"Trained {config.train.scorer}: epsilon={result.privacy.epsilon:.4f}, "
        f"z={result.privacy.noise_multiplier:.4f}, checkpoint={result.checkpoint}"
    )
    return result


@task(name="Generate Top-K Lists", cache_policy=NONE)
def recommend_task(config: ExperimentConfig, result: TrainResult, dataset: Dataset) -> RecLists:
    lists = recommend(config, result, dataset)
    get_run_logger().info(f"Built top-{lists.K} lists for {lists.n1} users")
    return lists


@task(name="Fairness Re-ranking", cache_policy=NONE)
def rerank_task(config: ExperimentConfig, lists: RecLists, dataset: Dataset) -> tuple:
    logger = get_run_logger()
    instance, baseline, fair = rerank(config, lists, dataset, group_users(dataset))
    logger.info(f"Truncation gap={baseline.gap_float:.5f}, re-ranked gap={fair.gap_float:.5f} (alpha={instance.alpha})")
    if not fair.feasible:
        logger.warning(f"⚠️ alpha={instance.alpha} infeasible, solved at the minimum gap {float(fair.alpha_used):.5f}")
    return instance, baseline, fair


@task(name="Evaluate and Save Run", cache_policy=NONE)
def evaluate_task(
    config: ExperimentConfig,
    dataset: Dataset,
    train_result: TrainResult,
    lists: RecLists,
    reranked: tuple,
    out_dir: Path,
) -> pd.DataFrame:
    logger = get_run_logger()
    instance, baseline, fair = reranked
    groups = group_users(dataset)
    manifest = new_manifest(config)
    manifest.dataset = dataset_stats(dataset).as_dict()
    certify(config, train_result, manifest)
    reports = evaluate(config, dataset, groups, {"DP-SGD": baseline, "DP-Fair": fair}, train_result, instance.alpha)
    result = ExperimentResult(config, dataset, groups, train_result, lists, instance, baseline, fair, reports, manifest)
    save_run(result, out_dir)
    logger.info(f"Report rows: {len(reports)}")
    return reports
