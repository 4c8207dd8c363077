"""
End-to-end experiment harness: ingest -> train -> recommend -> rerank -> evaluate.

Every stage runs inside ``stage(name)`` so a failure surfaces as a
``StageError`` carrying the stage tag. When an artifact root is given, all
outputs of a run land in ``<root>/<config_hash[:12]>/`` together with a
``manifest.json`` that traces them back to the resolved configuration.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import pandas as pd

from scripts.dpfair.config import ExperimentConfig
from scripts.dpfair.data import (
    Dataset,
    RejectedRow,
    UserGroups,
    build_dataset,
    dataset_stats,
    group_users,
    read_amazon_5core,
    read_interactions,
    save_bundle,
)
from scripts.dpfair.errors import PrivacyError, StageError
from scripts.dpfair.metrics import REPORT_COLUMNS, evaluate_lists, relevance_labels, report_frame
from scripts.dpfair.rerank import (
    RerankInstance,
    RerankSolution,
    build_instance,
    save_instance,
    save_solution,
    solution_lists,
    solve,
    truncate,
)
from scripts.dpfair.train import RecLists, TrainResult, suggest_clip_bounds, top_k_lists, train_dp
from scripts.utils.artifact_io import run_stamp, write_json
from scripts.utils.seed_utils import STREAMS

logger = logging.getLogger(__name__)

STAGES = ("ingest", "train", "recommend", "rerank", "evaluate", "sweep", "accountant", "report")
CERTIFICATE_COLUMNS = ["epsilon_certified", "z", "q", "T", "delta", "alpha", "feasible", "config_hash"]
SWEEP_COLUMNS = ["param", "value", *REPORT_COLUMNS, *CERTIFICATE_COLUMNS, "error"]


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"❌ Stage {name} failed: {e}")
        raise StageError(name, e) from e


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    seeds: dict
    run_stamp: str
    dataset: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    certificate: dict = field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> Path:
        return write_json(asdict(self), Path(path))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: Dataset
    groups: UserGroups
    train: TrainResult
    lists: RecLists
    instance: RerankInstance
    baseline: RerankSolution
    fair: RerankSolution
    reports: pd.DataFrame
    manifest: RunManifest


def run_dir(config: ExperimentConfig, artifact_root: Union[str, Path]) -> Path:
    return Path(artifact_root) / config.hash[:12]


def load_raw(config: ExperimentConfig) -> pd.DataFrame:
    ds = config.dataset
    if ds.source == "synthetic":
        # imported here so library users without the generator module still load
        from scripts.data_generation.a1_1_synthetic_interactions_generator import generate_interactions

        return generate_interactions(**asdict(config.synthetic), seed=config.seed)
    if ds.source == "amazon":
        return read_amazon_5core(ds.path)
    return read_interactions(ds.path)


def ingest(config: ExperimentConfig) -> tuple[Dataset, list[RejectedRow]]:
    with stage("ingest"):
        dataset, rejected = build_dataset(load_raw(config), config.seed, config.dataset.feedback)
        if rejected:
            logger.warning(f"⚠️ Rejected {len(rejected)} raw rows (first: {rejected[0].reason})")
        return dataset, rejected


def train_model(
    config: ExperimentConfig, dataset: Dataset, checkpoint_dir: Optional[Path] = None
) -> TrainResult:
    with stage("train"):
        train_config = config.train
        if config.pretune_clip:
            bounds = suggest_clip_bounds(dataset, train_config, steps=config.pretune_steps)
            train_config = replace(train_config, bounds=bounds)
        return train_dp(dataset, train_config, checkpoint_dir=checkpoint_dir)


def candidate_exclusions(config: ExperimentConfig) -> tuple[str, ...]:
    """Splits removed from the candidate pool: train always, validation unless it labels the constraint."""
    return ("train",) if config.rerank.constraint_split == "validation" else ("train", "validation")


def recommend(config: ExperimentConfig, result: TrainResult, dataset: Dataset) -> RecLists:
    with stage("recommend"):
        return top_k_lists(result.params, dataset, config.rerank.K, exclude=candidate_exclusions(config))


def rerank(
    config: ExperimentConfig, lists: RecLists, dataset: Dataset, groups: UserGroups
) -> tuple[RerankInstance, RerankSolution, RerankSolution]:
    """Returns the instance, the truncation baseline and the constrained solution."""
    with stage("rerank"):
        rr = config.rerank
        labels = relevance_labels(dataset, rr.constraint_split)
        instance = build_instance(lists, labels, groups, math.inf, rr.k)
        baseline = truncate(instance)
        alpha = rr.alpha
        if rr.alpha_mode == "relative" and math.isfinite(alpha):
            alpha = alpha * baseline.gap_float
        instance = instance.with_alpha(alpha)
        fair = solve(instance, node_limit=rr.node_limit)
        return instance, baseline, fair


def with_certificate(
    frame: pd.DataFrame, certificate: dict, alpha: Optional[float], feasible: Optional[bool], config_hash: str
) -> pd.DataFrame:
    """Attach the accountant certificate and the re-ranking outcome to every report row."""
    frame = frame.copy()
    frame["epsilon_certified"] = certificate["epsilon"]
    frame["z"] = certificate["z"]
    frame["q"] = certificate["q"]
    frame["T"] = certificate["T"]
    frame["delta"] = certificate["delta"]
    frame["alpha"] = alpha
    frame["feasible"] = feasible
    frame["config_hash"] = config_hash[:12]
    return frame


def evaluate(
    config: ExperimentConfig,
    dataset: Dataset,
    groups: UserGroups,
    solutions: dict,
    result: TrainResult,
    alpha: float,
) -> pd.DataFrame:
    with stage("evaluate"):
        labels = relevance_labels(dataset, "test")
        privacy = result.privacy
        epsilon = config.epsilon if config.epsilon is not None else privacy.epsilon
        frames = []
        for algorithm, solution in solutions.items():
            reports = evaluate_lists(solution_lists(solution), labels, groups, config.rerank.k)
            frame = report_frame(reports, config.dataset.name, config.train.scorer, algorithm, epsilon)
            alpha_column = alpha if algorithm == "DP-Fair" else math.inf
            frames.append(with_certificate(frame, privacy.certificate(), alpha_column, solution.feasible, config.hash))
        return pd.concat(frames, ignore_index=True)


def new_manifest(config: ExperimentConfig) -> RunManifest:
    return RunManifest(
        config_hash=config.hash,
        config=config.to_dict(),
        seeds={"master": config.seed, "streams": dict(STREAMS)},
        run_stamp=run_stamp(),
    )


def certify(config: ExperimentConfig, result: TrainResult, manifest: RunManifest):
    """Record the accountant certificate and refuse runs whose certified ε exceeds the target."""
    if result.checkpoint is not None:
        manifest.checkpoints.append(str(result.checkpoint))
    manifest.certificate = result.privacy.certificate()
    if config.non_private:
        logger.info("Non-private run: accountant bypassed, z = 0")
    elif config.epsilon is not None and result.privacy.epsilon > config.epsilon:
        cause = PrivacyError(f"certified epsilon {result.privacy.epsilon} exceeds the target {config.epsilon}")
        raise StageError("train", cause)


def save_run(result: ExperimentResult, out: Union[str, Path]) -> Path:
    """Write lists, rerank instance and solutions, the report and manifest.json into ``out``."""
    out = Path(out)
    result.lists.save(out / "rec_lists.csv")
    save_instance(result.instance, out / "rerank_instance.csv")
    save_solution(result.instance, result.baseline, out / "solution_truncated.csv")
    save_solution(result.instance, result.fair, out / "solution_reranked.csv")
    report_path = out / "report.csv"
    result.reports.to_csv(report_path, index=False, lineterminator="\n")
    write_json(result.train.log, out / "train_log.json")
    if str(report_path) not in result.manifest.reports:
        result.manifest.reports.append(str(report_path))
    result.manifest.save(out / "manifest.json")
    logger.info(f"✅ Artifacts written to {out}")
    return out


def run_experiment(
    config: ExperimentConfig,
    artifact_root: Optional[Union[str, Path]] = None,
    dataset: Optional[Dataset] = None,
    train_result: Optional[TrainResult] = None,
    lists: Optional[RecLists] = None,
) -> ExperimentResult:
    """Produce the Total/Act./InAct./gap report for DP-SGD (truncation) and DP-Fair (re-ranked).

    ``dataset``, ``train_result`` and ``lists`` let sweeps reuse earlier stages.
    """
    out = run_dir(config, artifact_root) if artifact_root is not None else None
    manifest = new_manifest(config)
    logger.info(f"🚀 Running experiment {config.hash[:12]} (epsilon={config.epsilon}, alpha={config.rerank.alpha})")

    if dataset is None:
        dataset, _ = ingest(config)
        if out is not None:
            save_bundle(dataset, out / "bundle")
    manifest.dataset = dataset_stats(dataset).as_dict()
    groups = group_users(dataset)

    if train_result is None:
        train_result = train_model(config, dataset, checkpoint_dir=out / "checkpoints" if out is not None else None)
        lists = None
    certify(config, train_result, manifest)

    if lists is None:
        lists = recommend(config, train_result, dataset)
    instance, baseline, fair = rerank(config, lists, dataset, groups)
    reports = evaluate(config, dataset, groups, {"DP-SGD": baseline, "DP-Fair": fair}, train_result, instance.alpha)

    result = ExperimentResult(config, dataset, groups, train_result, lists, instance, baseline, fair, reports, manifest)
    if out is not None:
        save_run(result, out)
    return result


def sweep(
    config: ExperimentConfig,
    param: str,
    grid: Optional[Sequence[float]] = None,
    artifact_root: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """One block of report rows per grid point; failed points are recorded and the sweep continues.

    ``clip`` retrains per point with C_u = C_v = C_w = C; ``alpha`` reuses one trained model.
    """
    if param not in ("clip", "alpha"):
        raise StageError("sweep", ValueError(f"unknown sweep parameter '{param}'"))
    grid = list(grid if grid is not None else getattr(config.sweep, param))
    if not grid:
        raise StageError("sweep", ValueError(f"empty grid for '{param}'"))

    if param == "clip" and config.pretune_clip:
        logger.warning("⚠️ pretune_clip is ignored in a clip sweep; each point trains with its grid bound")
    dataset, _ = ingest(config)
    shared: dict = {}
    frames = []
    for value in grid:
        try:
            point = config.with_clip(value) if param == "clip" else config.with_alpha(value)
            if param == "alpha" and "train" in shared:
                result = run_experiment(
                    point, artifact_root, dataset=dataset, train_result=shared["train"], lists=shared["lists"]
                )
            else:
                result = run_experiment(point, artifact_root, dataset=dataset)
                if param == "alpha":
                    shared.update(train=result.train, lists=result.lists)
            frame = result.reports.copy()
            frame["error"] = None
        except Exception as e:
            logger.error(f"❌ Sweep point {param}={value} failed: {e}")
            frame = pd.DataFrame([{"error": str(e)}])
        frame.insert(0, "value", value)
        frame.insert(0, "param", param)
        frames.append(frame.reindex(columns=SWEEP_COLUMNS))
    table = pd.concat(frames, ignore_index=True)
    if artifact_root is not None:
        path = Path(artifact_root) / f"sweep_{param}_{config.hash[:12]}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, lineterminator="\n")
        logger.info(f"✅ Sweep table written to {path}")
    return table


def collect_reports(artifact_root: Union[str, Path]) -> pd.DataFrame:
    """Concatenate every run's report.csv below ``artifact_root``."""
    paths = sorted(Path(artifact_root).glob("*/report.csv"))
    if not paths:
        return pd.DataFrame(columns=[*REPORT_COLUMNS, *CERTIFICATE_COLUMNS])
    return pd.concat([pd.read_csv(p) for p in paths], ignore_index=True)
