import json
import math

import pandas as pd
import pytest

from scripts.dpfair.config import beauty_5core_path, config_from_dict
from scripts.dpfair.data import dataset_stats
from scripts.dpfair.errors import EXIT_STAGE_FAILURE, PrivacyError, StageError, exit_code_for
from scripts.dpfair.experiment import (
    CERTIFICATE_COLUMNS,
    SWEEP_COLUMNS,
    candidate_exclusions,
    certify,
    collect_reports,
    ingest,
    new_manifest,
    run_dir,
    run_experiment,
    stage,
    sweep,
)
from scripts.dpfair.metrics import REPORT_COLUMNS
from scripts.dpfair.privacy import PrivacySpec
from scripts.dpfair.train import TrainResult

from tests.conftest import small_config_dict

RUN_FILES = (
    "rec_lists.csv",
    "rerank_instance.csv",
    "solution_truncated.csv",
    "solution_reranked.csv",
    "report.csv",
    "train_log.json",
    "manifest.json",
    "bundle/bundle.json",
    "checkpoints/final.npz",
)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("artifacts")
    config = config_from_dict(small_config_dict())
    return root, run_experiment(config, artifact_root=root)


class TestRunExperiment:
    def test_report_layout(self, small_run):
        _, result = small_run
        df = result.reports
        assert list(df.columns) == [*REPORT_COLUMNS, *CERTIFICATE_COLUMNS]
        assert sorted(set(df["algorithm"])) == ["DP-Fair", "DP-SGD"]
        assert sorted(set(df["metric"])) == ["F1@4", "NDCG@4"]
        assert (df["epsilon_certified"] <= 2.0).all()
        assert (df.loc[df["algorithm"] == "DP-SGD", "alpha"] == math.inf).all()

    def test_rerank_trades_score_for_gap(self, small_run):
        _, result = small_run
        assert result.fair.objective <= result.baseline.objective
        if result.fair.feasible:
            assert result.fair.gap_float <= 0.01
        assert result.instance.alpha == 0.01

    def test_artifacts_and_manifest(self, small_run):
        root, result = small_run
        out = run_dir(result.config, root)
        for name in RUN_FILES:
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["config_hash"] == result.config.hash
        assert manifest["certificate"]["epsilon"] <= 2.0
        assert manifest["seeds"]["master"] == 11
        assert manifest["dataset"]["users"] == result.dataset.n1

    def test_rerun_gives_identical_numbers(self, small_run):
        _, result = small_run
        again = run_experiment(result.config)
        pd.testing.assert_frame_equal(again.reports, result.reports)
        assert again.fair.items == result.fair.items

    def test_collect_reports(self, small_run):
        root, result = small_run
        collected = collect_reports(root)
        assert len(collected) == len(result.reports)
        assert collected["config_hash"].iloc[0] == result.config.hash[:12]


def test_infinite_alpha_keeps_the_truncation():
    config = config_from_dict(small_config_dict(rerank={"alpha": ".inf"}))
    result = run_experiment(config)
    assert result.fair.items == result.baseline.items
    rows = result.reports.set_index(["algorithm", "metric"])
    for metric in ("NDCG@4", "F1@4"):
        assert rows.loc[("DP-Fair", metric), "total"] == rows.loc[("DP-SGD", metric), "total"]
        assert rows.loc[("DP-Fair", metric), "gap"] == rows.loc[("DP-SGD", metric), "gap"]


def test_infinite_epsilon_trains_without_noise():
    config = config_from_dict(small_config_dict(privacy={"epsilon": ".inf"}))
    result = run_experiment(config)
    assert result.train.privacy.noise_multiplier == 0.0
    assert math.isinf(result.train.privacy.epsilon)
    assert result.reports["epsilon"].map(math.isinf).all()


def test_relative_alpha_scales_the_truncation_gap():
    config = config_from_dict(small_config_dict(rerank={"alpha": 0.5, "alpha_mode": "relative"}))
    result = run_experiment(config)
    assert result.instance.alpha == pytest.approx(0.5 * result.baseline.gap_float)


def test_candidate_pool_follows_the_constraint_split():
    assert candidate_exclusions(config_from_dict(small_config_dict())) == ("train",)
    test_labels = config_from_dict(small_config_dict(rerank={"constraint_split": "test"}))
    assert candidate_exclusions(test_labels) == ("train", "validation")


class TestFailures:
    def test_stage_tag_on_missing_input(self, tmp_path):
        config = config_from_dict(small_config_dict(dataset={"source": "csv", "path": str(tmp_path / "none.csv")}))
        with pytest.raises(StageError) as excinfo:
            run_experiment(config)
        assert excinfo.value.stage == "ingest"
        assert exit_code_for(excinfo.value) == EXIT_STAGE_FAILURE

    def test_stage_does_not_rewrap(self):
        inner = StageError("train", ValueError("boom"))
        with pytest.raises(StageError) as excinfo:
            with stage("evaluate"):
                raise inner
        assert excinfo.value is inner

    def test_certified_epsilon_above_target_is_refused(self, small_config):
        spec = PrivacySpec(epsilon=5.0, delta=1e-5, noise_multiplier=1.0, sampling_rate=0.1, steps=10)
        result = TrainResult(params=None, privacy=spec, log=[], checkpoint=None)
        with pytest.raises(StageError) as excinfo:
            certify(small_config, result, new_manifest(small_config))
        assert isinstance(excinfo.value.cause, PrivacyError)


class TestSweep:
    def test_alpha_sweep_records_failed_points(self, tmp_path):
        config = config_from_dict(small_config_dict())
        table = sweep(config, "alpha", grid=[0.05, -1.0], artifact_root=tmp_path)
        assert list(table.columns) == SWEEP_COLUMNS
        ok, failed = table[table["value"] == 0.05], table[table["value"] == -1.0]
        assert len(ok) == 4 and ok["error"].isna().all()
        assert len(failed) == 1 and "alpha" in failed["error"].iloc[0]
        assert (tmp_path / f"sweep_alpha_{config.hash[:12]}.csv").exists()

    def test_clip_sweep_retrains_per_point(self):
        config = config_from_dict(small_config_dict())
        table = sweep(config, "clip", grid=[0.1, 1.0])
        assert table["error"].isna().all()
        assert table.groupby("value")["config_hash"].nunique().eq(1).all()
        assert table["config_hash"].nunique() == 2

    def test_clip_sweep_uses_grid_bounds_over_pretuning(self, monkeypatch):
        def fail(*args, **kwargs):
            raise AssertionError("pre-tuning ran during a clip sweep")

        monkeypatch.setattr("scripts.dpfair.experiment.suggest_clip_bounds", fail)
        config = config_from_dict(small_config_dict(train={"pretune_clip": True}))
        table = sweep(config, "clip", grid=[0.1, 1.0])
        assert table["error"].isna().all()
        assert config.with_clip(0.1).train.bounds.C_u == 0.1

    def test_unknown_parameter(self, small_config):
        with pytest.raises(StageError):
            sweep(small_config, "lr")


def _f1_row(reports: pd.DataFrame, algorithm: str) -> pd.Series:
    f1 = reports[reports["metric"] == "F1@10"].set_index("algorithm")
    return f1.loc[algorithm]


@pytest.mark.slow
def test_desk_scale_directions():
    """300 users, 500 items, BPR-MF, K=20, k=10, default config (validation labels, alpha 0.01), five seeds."""
    total_kept = noise_widens = 0
    for seed in range(1, 6):
        config = config_from_dict({"seed": seed})
        result = run_experiment(config)
        assert result.train.privacy.epsilon <= 1.0
        assert result.fair.gap_float <= max(config.rerank.alpha, float(result.fair.alpha_used or 0)) + 1e-12
        baseline, fair = _f1_row(result.reports, "DP-SGD"), _f1_row(result.reports, "DP-Fair")
        # report values are percentages
        total_kept += fair["total"] >= baseline["total"] - 0.2
        plain = run_experiment(config.with_epsilon(math.inf))
        noise_widens += baseline["gap"] >= _f1_row(plain.reports, "DP-SGD")["gap"]
    assert total_kept >= 3
    assert noise_widens >= 3


@pytest.mark.slow
@pytest.mark.skipif(beauty_5core_path() is None, reason="DPFAIR_BEAUTY_5CORE_PATH is not set")
def test_amazon_beauty_statistics():
    config = config_from_dict(
        {"dataset": {"name": "beauty", "source": "amazon", "path": str(beauty_5core_path()), "feedback": "explicit"}}
    )
    dataset, _ = ingest(config)
    stats = dataset_stats(dataset).as_dict()
    assert stats == {"users": 22_363, "items": 12_101, "interactions": 198_502, "sparsity_pct": 99.93}
