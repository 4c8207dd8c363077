from pathlib import Path

import pytest
from prefect.testing.utilities import prefect_test_harness

from scripts.data_generation.a1_1_synthetic_interactions_generator import generate_synthetic_interactions_flow
from scripts.dpfair.config import DEFAULTS
from scripts.flow.flow__dp_fair_experiment import dp_fair_experiment_flow
from scripts.flow.flow__hyperparameter_sweep import hyperparameter_sweep_flow
from scripts.s01_prefect_variables_create import create_prefect_variables, default_variables

from tests.conftest import SMALL_SYNTHETIC, small_config_dict


@pytest.fixture(autouse=True, scope="module")
def prefect_backend():
    with prefect_test_harness():
        yield


def test_experiment_flow_writes_a_run(tmp_path):
    outcome = dp_fair_experiment_flow(overrides=small_config_dict(), artifact_root=str(tmp_path))
    run = Path(outcome["run_dir"])
    assert run.parent == tmp_path and run.name == outcome["config_hash"][:12]
    assert (run / "report.csv").exists() and (run / "manifest.json").exists()
    assert outcome["epsilon"] <= 2.0
    assert {row["algorithm"] for row in outcome["rows"]} == {"DP-SGD", "DP-Fair"}


def test_experiment_flow_fails_on_bad_config(tmp_path):
    with pytest.raises(Exception):
        dp_fair_experiment_flow(overrides={"train": {"depth": 3}}, artifact_root=str(tmp_path))


def test_sweep_flow_runs_the_alpha_grid(tmp_path):
    results = hyperparameter_sweep_flow(
        overrides=small_config_dict(), run_clip_sweep=False, artifact_root=str(tmp_path)
    )
    assert results["clip"] is None
    assert len(results["alpha"]) == 8
    assert sorted({row["value"] for row in results["alpha"]}) == [0.0, 0.05]
    assert list(tmp_path.glob("sweep_alpha_*.csv"))


def test_generator_flow_saves_under_the_data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("DPFAIR_DATA_DIR", str(tmp_path))
    outcome = generate_synthetic_interactions_flow(
        num_users=SMALL_SYNTHETIC["num_users"], num_items=SMALL_SYNTHETIC["num_items"], seed=3
    )
    assert Path(outcome["path"]).parent == tmp_path
    assert outcome["users"] == SMALL_SYNTHETIC["num_users"]


def test_variable_bootstrap_is_idempotent():
    variables = {"dpfair_test_grid": [0.1, 1.0]}
    assert create_prefect_variables(variables) == {"dpfair_test_grid": "set"}
    assert create_prefect_variables(variables) == {"dpfair_test_grid": "skip"}


def test_default_variables_follow_the_config_defaults():
    variables = default_variables()
    assert variables["sweep_alpha_grid"] == list(DEFAULTS["sweep"]["alpha"])
    assert variables["synthetic_num_users"] == DEFAULTS["synthetic"]["num_users"]
    assert all(name.startswith(("synthetic_", "sweep_")) for name in variables)
