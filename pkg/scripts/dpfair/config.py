"""
Experiment configuration.

The YAML file (``configs/dp_fair.yml``) holds every experiment knob; the
environment (``.env`` / shell) only supplies paths. Missing keys take the
defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from dotenv import load_dotenv

from scripts.dpfair.errors import ConfigError, DPFairError
from scripts.dpfair.privacy import ClipBounds
from scripts.dpfair.train import TrainConfig
from scripts.utils.artifact_io import config_hash

# Load envs
load_dotenv()

DEFAULT_CONFIG_PATH = Path("configs/dp_fair.yml")
DATA_SOURCES = ("synthetic", "csv", "amazon")
CONSTRAINT_SPLITS = ("validation", "test")
ALPHA_MODES = ("absolute", "relative")


def data_dir() -> Path:
    return Path(os.getenv("DPFAIR_DATA_DIR", "data"))


def artifact_dir() -> Path:
    return Path(os.getenv("DPFAIR_ARTIFACT_DIR", "artifacts"))


def beauty_5core_path() -> Optional[Path]:
    value = os.getenv("DPFAIR_BEAUTY_5CORE_PATH")
    return Path(value) if value else None


DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "dataset": {
        "name": "synthetic",
        "source": "synthetic",
        "path": None,
        "feedback": "implicit",
    },
    "synthetic": {
        "num_users": 300,
        "num_items": 500,
        "active_fraction": 0.2,
        "activity_ratio": 5.0,
        "inactive_interactions": 12,
        "num_clusters": 8,
        "in_cluster_prob": 0.8,
    },
    "train": {
        "scorer": "mf",
        "d": 32,
        "learning_rate": 0.05,
        "decay": 1.0,
        "lam": 0.0001,
        "expected_batch": 64,
        "steps": 3000,
        "clip": {"C_u": 1.0, "C_v": 1.0, "C_w": None},
        "pretune_clip": False,
        "pretune_steps": 500,
        "log_every": 100,
        "checkpoint_every": 0,
    },
    "privacy": {
        "epsilon": 1.0,
        "z": None,
        "delta_exponent": 1.5,
    },
    "rerank": {
        "K": 20,
        "k": 10,
        "alpha": 0.01,
        "alpha_mode": "absolute",
        "constraint_split": "validation",
        "node_limit": 5_000_000,
    },
    "sweep": {
        "clip": [0.01, 0.1, 0.5, 1.0, 5.0, 50.0],
        "alpha": [0.05, 0.02, 0.01, 0.005, 0.002, 0.0],
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    source: str = "synthetic"
    path: Optional[str] = None
    feedback: str = "implicit"


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 300
    num_items: int = 500
    active_fraction: float = 0.2
    activity_ratio: float = 5.0
    inactive_interactions: int = 12
    num_clusters: int = 8
    in_cluster_prob: float = 0.8


@dataclass(frozen=True)
class RerankConfig:
    K: int = 20
    k: int = 10
    alpha: float = 0.01
    alpha_mode: str = "absolute"
    constraint_split: str = "validation"
    node_limit: int = 5_000_000


@dataclass(frozen=True)
class SweepConfig:
    clip: tuple = ()
    alpha: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretune_clip: bool = False
    pretune_steps: int = 500
    epsilon: Optional[float] = 1.0
    z: Optional[float] = None
    delta_exponent: float = 1.5
    rerank: RerankConfig = field(default_factory=RerankConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def non_private(self) -> bool:
        return self.epsilon is not None and math.isinf(self.epsilon)

    def to_dict(self) -> dict:
        """Plain-data view used for hashing and the run manifest."""
        out = asdict(self)
        out["train"]["bounds"] = self.train.bounds.as_dict()
        out["train"].pop("progress", None)
        out["sweep"] = {"clip": list(self.sweep.clip), "alpha": list(self.sweep.alpha)}
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_clip(self, C: float) -> "ExperimentConfig":
        """Fixed bounds C_u = C_v = C_w = C; turns off pre-tuning, which would overwrite them."""
        return replace(self, train=replace(self.train, bounds=ClipBounds.uniform(C)), pretune_clip=False)

    def with_alpha(self, alpha: float) -> "ExperimentConfig":
        return replace(self, rerank=replace(self.rerank, alpha=alpha))

    def with_epsilon(self, epsilon: Optional[float]) -> "ExperimentConfig":
        if epsilon is not None and math.isinf(epsilon):
            train = _build(self.train, z=0.0, epsilon_target=None)
        else:
            train = _build(self.train, z=self.z, epsilon_target=epsilon)
        return replace(self, epsilon=epsilon, train=train)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], value, f"{where}.")
        else:
            out[key] = value
    return out


def _number(value: Any, name: str, allow_none: bool = True) -> Optional[float]:
    if value is None:
        if allow_none:
            return None
        raise ConfigError(f"'{name}' is required")
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity", ".inf"):
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be a number, got {value!r}") from None


def _check_choice(value: str, choices: tuple, name: str):
    if value not in choices:
        raise ConfigError(f"'{name}' must be one of {choices}, got {value!r}")


def _build(config, **changes):
    try:
        return replace(config, **changes)
    except DPFairError as e:
        raise ConfigError(str(e)) from e


def config_from_dict(raw: Optional[dict] = None) -> ExperimentConfig:
    """Resolve a (partial) config mapping against the defaults."""
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    merged = _merge(DEFAULTS, raw or {})
    ds, syn, tr, pv, rr, sw = (merged[k] for k in ("dataset", "synthetic", "train", "privacy", "rerank", "sweep"))
    _check_choice(ds["source"], DATA_SOURCES, "dataset.source")
    _check_choice(rr["constraint_split"], CONSTRAINT_SPLITS, "rerank.constraint_split")
    _check_choice(rr["alpha_mode"], ALPHA_MODES, "rerank.alpha_mode")
    if ds["source"] != "synthetic" and not ds["path"]:
        raise ConfigError(f"dataset.path is required for source '{ds['source']}'")

    seed = int(merged["seed"])
    epsilon = _number(pv["epsilon"], "privacy.epsilon")
    z = _number(pv["z"], "privacy.z")
    if epsilon is None and z is None:
        raise ConfigError("set privacy.epsilon or privacy.z")
    clip = tr["clip"]
    C_u = _number(clip["C_u"], "train.clip.C_u", allow_none=False)
    C_v = _number(clip["C_v"], "train.clip.C_v", allow_none=False)
    C_w = _number(clip["C_w"], "train.clip.C_w")
    alpha = _number(rr["alpha"], "rerank.alpha", allow_none=False)
    try:
        bounds = ClipBounds(C_u, C_v, C_w if C_w is not None else C_v)
        train = TrainConfig(
            learning_rate=float(tr["learning_rate"]),
            decay=float(tr["decay"]),
            lam=float(tr["lam"]),
            expected_batch=int(tr["expected_batch"]),
            steps=int(tr["steps"]),
            bounds=bounds,
            z=z,
            epsilon_target=epsilon,
            delta_exponent=float(pv["delta_exponent"]),
            seed=seed,
            scorer=str(tr["scorer"]),
            d=int(tr["d"]),
            log_every=int(tr["log_every"]),
            checkpoint_every=int(tr["checkpoint_every"]),
        )
        config = ExperimentConfig(
            seed=seed,
            dataset=DatasetConfig(**ds),
            synthetic=SyntheticConfig(**syn),
            train=train,
            pretune_clip=bool(tr["pretune_clip"]),
            pretune_steps=int(tr["pretune_steps"]),
            epsilon=epsilon,
            z=z,
            delta_exponent=float(pv["delta_exponent"]),
            rerank=RerankConfig(
                K=int(rr["K"]),
                k=int(rr["k"]),
                alpha=alpha,
                alpha_mode=rr["alpha_mode"],
                constraint_split=rr["constraint_split"],
                node_limit=int(rr["node_limit"]),
            ),
            sweep=SweepConfig(
                clip=tuple(_number(v, "sweep.clip", allow_none=False) for v in sw["clip"]),
                alpha=tuple(_number(v, "sweep.alpha", allow_none=False) for v in sw["alpha"]),
            ),
        )
        if epsilon is not None:
            config = config.with_epsilon(epsilon)
    except ConfigError:
        raise
    except (DPFairError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    validate(config)
    return config


def validate(config: ExperimentConfig):
    rr = config.rerank
    if not (1 <= rr.k <= rr.K):
        raise ConfigError(f"need 1 <= k <= K, got k={rr.k}, K={rr.K}")
    if rr.alpha < 0:
        raise ConfigError(f"rerank.alpha must be nonnegative, got {rr.alpha}")
    if config.delta_exponent <= 1:
        raise ConfigError(f"privacy.delta_exponent must exceed 1 so that delta < 1/n, got {config.delta_exponent}")
    if config.epsilon is not None and not (config.epsilon > 0):
        raise ConfigError(f"privacy.epsilon must be positive, got {config.epsilon}")
    syn = config.synthetic
    if syn.num_users < 5 or syn.num_items < 2:
        raise ConfigError("synthetic dataset needs at least 5 users and 2 items")
    if not (0 < syn.active_fraction < 1):
        raise ConfigError(f"synthetic.active_fraction must lie in (0, 1), got {syn.active_fraction}")


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read the YAML file at ``path`` (default ``configs/dp_fair.yml`` when present) and apply ``overrides``."""
    raw: dict = {}
    if path is not None or DEFAULT_CONFIG_PATH.exists():
        path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
        if not path.exists():
            raise ConfigError(f"Missing config file: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
    if overrides:
        raw = _deep_update(raw, overrides)
    return config_from_dict(raw)


def _deep_update(base: dict, updates: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``train.steps=500`` -> {"train": {"steps": 500}} (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    key, value = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"empty key in override {text!r}")
    node: Any = yaml.safe_load(value)
    for part in reversed(parts):
        node = {part: node}
    return node
