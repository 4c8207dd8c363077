"""
Stage I: DP-SGD over BPR triples and candidate-list generation.

One loop serves both the private and the plain variant so that a run with
z = 0 and unbounded clipping follows the plain SGD trajectory exactly:

- Poisson-sample a batch from the ``sampling`` stream (rate q = m / n)
- compute per-example gradients, clip them per group
- sum each group in a fixed order (``np.add.at`` over the batch order)
- add one Gaussian draw per coordinate of each group sum from the ``noise`` stream
- Θ ← Θ − (η_t / m) · Σ g̃ with η_t = η · decay^epoch
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from scripts.dpfair.data import Dataset
from scripts.dpfair.errors import ConfigError, DataError, TrainingDivergedError
from scripts.dpfair.model import SCORERS, ModelParams, batch_grads, init_params, save_checkpoint, score_all
from scripts.dpfair.privacy import (
    GROUPS_BY_SCORER,
    ClipBounds,
    GroupNorms,
    PrivacySpec,
    check_delta,
    clip_batch,
    noise_group_sums,
    privacy_spec_for,
    rdp_orders,
)
from scripts.utils.artifact_io import save_csv
from scripts.utils.seed_utils import derive_rng

logger = logging.getLogger(__name__)

REC_LIST_COLUMNS = ["user", "rank", "item", "score"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    decay: float = 1.0
    lam: float = 1e-4
    expected_batch: int = 64
    steps: int = 2000
    bounds: ClipBounds = field(default_factory=lambda: ClipBounds.uniform(1.0))
    z: Optional[float] = 0.0
    epsilon_target: Optional[float] = None
    delta: Optional[float] = None
    delta_exponent: float = 1.5
    seed: int = 0
    scorer: str = "mf"
    d: int = 32
    log_every: int = 100
    checkpoint_every: int = 0
    progress: bool = False

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (self.decay > 0):
            raise ConfigError(f"decay must be positive, got {self.decay}")
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")
        if self.expected_batch < 1:
            raise ConfigError(f"expected_batch must be positive, got {self.expected_batch}")
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}, got '{self.scorer}'")
        if self.d < 1:
            raise ConfigError(f"d must be positive, got {self.d}")
        if self.z is not None and self.z < 0:
            raise ConfigError(f"z must be nonnegative, got {self.z}")
        if self.epsilon_target is not None and not (self.epsilon_target > 0):
            raise ConfigError(f"epsilon_target must be positive, got {self.epsilon_target}")
        if self.z is None and self.epsilon_target is None:
            raise ConfigError("set either z or epsilon_target")
        noisy = (self.epsilon_target is not None and math.isfinite(self.epsilon_target)) or (
            self.epsilon_target is None and self.z
        )
        if noisy and not self.bounds.is_finite:
            raise ConfigError("infinite clip bounds are only allowed when z = 0")

    @property
    def groups(self) -> int:
        return GROUPS_BY_SCORER[self.scorer]

    def resolve_delta(self, n: int) -> float:
        return self.delta if self.delta is not None else float(n) ** (-self.delta_exponent)


class TrainResult(NamedTuple):
    params: ModelParams
    privacy: PrivacySpec
    log: list
    checkpoint: Optional[Path]


@dataclass
class RecLists:
    """Per-user top-K candidate lists, ordered by (−score, item)."""

    K: int
    items: list
    scores: list
    short: frozenset = frozenset()

    @property
    def n1(self) -> int:
        return len(self.items)

    def for_user(self, u: int) -> list[tuple[int, float]]:
        return list(zip(self.items[u].tolist(), self.scores[u].tolist()))

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"user": u, "rank": r + 1, "item": int(item), "score": float(score)}
            for u in range(self.n1)
            for r, (item, score) in enumerate(zip(self.items[u], self.scores[u]))
        ]
        return pd.DataFrame(rows, columns=REC_LIST_COLUMNS)

    def save(self, path: Union[str, Path]) -> Path:
        return save_csv(self.to_frame(), Path(path), REC_LIST_COLUMNS)

    @classmethod
    def load(cls, path: Union[str, Path], n1: int, K: int) -> "RecLists":
        df = pd.read_csv(path).sort_values(["user", "rank"])
        items = [np.empty(0, dtype=np.int64) for _ in range(n1)]
        scores = [np.empty(0) for _ in range(n1)]
        for u, grp in df.groupby("user", sort=True):
            items[int(u)] = grp["item"].to_numpy(dtype=np.int64)
            scores[int(u)] = grp["score"].to_numpy(dtype=float)
        short = frozenset(u for u in range(n1) if len(items[u]) < K)
        return cls(K=K, items=items, scores=scores, short=short)


def objective(params: ModelParams, dataset: Dataset, lam: float) -> float:
    """Mean BPR loss over all training triples."""
    users, pos, neg = dataset.triples()
    return float(batch_grads(params, users, pos, neg, lam).loss.mean())


def _group_sums(params: ModelParams, grads, users, pos, neg):
    sum_u = np.zeros_like(params.U)
    sum_v = np.zeros_like(params.V)
    np.add.at(sum_u, users, grads.user)
    np.add.at(sum_v, pos, grads.pos)
    np.add.at(sum_v, neg, grads.neg)
    sum_w = grads.w.sum(axis=0) if grads.w.shape[1] else np.zeros(0)
    return sum_u, sum_v, sum_w


def _sgd_loop(
    dataset: Dataset,
    config: TrainConfig,
    params: ModelParams,
    sampling_rng: np.random.Generator,
    noise_rng: Optional[np.random.Generator],
    z: float,
    private: bool,
    steps: int,
    rho: Optional[np.ndarray] = None,
    delta: Optional[float] = None,
    checkpoint_dir: Optional[Path] = None,
    on_norms: Optional[Callable[[GroupNorms], None]] = None,
) -> list[dict]:
    users_all, pos_all, neg_all = dataset.triples()
    n, m = dataset.n, config.expected_batch
    q = m / n
    steps_per_epoch = max(1, math.ceil(n / m))
    log_every = max(1, config.log_every)
    log: list[dict] = []
    epoch_losses: list[float] = []
    orders = np.arange(2, 2 + len(rho)) if rho is not None else None

    def eps_so_far(t: int) -> float:
        if rho is None:
            return math.inf
        return float(np.min(t * rho + math.log(1.0 / delta) / (orders - 1)))

    for t in tqdm(range(steps), desc="dp-sgd" if private else "sgd", disable=not config.progress):
        epoch = t // steps_per_epoch
        lr = config.learning_rate * config.decay**epoch
        idx = np.flatnonzero(sampling_rng.random(n) < q)
        users, pos, neg = users_all[idx], pos_all[idx], neg_all[idx]
        grads = batch_grads(params, users, pos, neg, config.lam)
        if on_norms is not None or private:
            clipped, norms = clip_batch(grads, config.bounds)
            if on_norms is not None:
                on_norms(norms)
            if private:
                grads = clipped
        sum_u, sum_v, sum_w = _group_sums(params, grads, users, pos, neg)
        if private:
            sum_u, sum_v, sum_w = noise_group_sums(sum_u, sum_v, sum_w, config.bounds, z, noise_rng)
        loss = float(grads.loss.mean()) if idx.size else math.nan
        scale = lr / m
        new_U = params.U - scale * sum_u
        new_V = params.V - scale * sum_v
        new_W = params.W - scale * sum_w if sum_w.size else params.W
        if (idx.size and not math.isfinite(loss)) or not (
            np.isfinite(new_U).all() and np.isfinite(new_V).all() and np.isfinite(new_W).all()
        ):
            path = None
            if checkpoint_dir is not None:
                path = save_checkpoint(params, checkpoint_dir / f"diverged_step_{t:06d}", rng=sampling_rng, extra={"step": t})
            logger.error(f"Training diverged at step {t} (loss={loss}); last good parameters at {path}")
            raise TrainingDivergedError(
                f"non-finite loss or update at step {t}", step=t, checkpoint_path=str(path) if path else None
            )
        params.U, params.V, params.W = new_U, new_V, new_W
        if idx.size:
            epoch_losses.append(loss)

        done = t + 1
        if done % log_every == 0 or done == steps:
            log.append({"step": done, "epoch": epoch, "loss": loss, "epsilon": eps_so_far(done)})
        if done % steps_per_epoch == 0 or done == steps:
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
            logger.info(f"epoch {epoch}: mean batch loss {mean_loss:.5f}, epsilon so far {eps_so_far(done):.4f}")
            epoch_losses = []
            if (
                checkpoint_dir is not None
                and config.checkpoint_every > 0
                and done % steps_per_epoch == 0
                and (epoch + 1) % config.checkpoint_every == 0
            ):
                save_checkpoint(params, checkpoint_dir / f"epoch_{epoch + 1:04d}", rng=sampling_rng, extra={"step": done})
    return log


def _prepare(dataset: Dataset, config: TrainConfig) -> float:
    if dataset.negatives is None:
        raise DataError("dataset has no sampled negatives; cannot form BPR triples")
    if config.expected_batch > dataset.n:
        raise ConfigError(f"expected_batch={config.expected_batch} exceeds the number of triples n={dataset.n}")
    delta = config.resolve_delta(dataset.n)
    check_delta(delta, dataset.n)
    return delta


def _train(
    dataset: Dataset,
    config: TrainConfig,
    private: bool,
    init: Optional[ModelParams],
    checkpoint_dir: Optional[Union[str, Path]],
) -> TrainResult:
    delta = _prepare(dataset, config)
    q = config.expected_batch / dataset.n
    if private:
        spec = privacy_spec_for(config.z, config.epsilon_target, delta, q, config.steps, config.groups)
    else:
        spec = PrivacySpec(math.inf, delta, 0.0, q, config.steps, config.groups)
    params = init.copy() if init is not None else init_params(
        dataset.n1, dataset.n2, config.d, config.scorer, derive_rng(config.seed, "init")
    )
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    rho = rdp_orders(q, spec.accounting_multiplier) if spec.is_private else None
    logger.info(
        f"Training {config.scorer} ({'private' if private else 'plain'}): n={dataset.n}, q={q:.5f}, "
        f"T={config.steps}, z={spec.noise_multiplier:.4f}, delta={delta:.3g}"
    )
    log = _sgd_loop(
        dataset,
        config,
        params,
        derive_rng(config.seed, "sampling"),
        derive_rng(config.seed, "noise"),
        spec.noise_multiplier,
        private,
        config.steps,
        rho=rho,
        delta=delta,
        checkpoint_dir=checkpoint_dir,
    )
    final = None
    if checkpoint_dir is not None:
        final = save_checkpoint(params, checkpoint_dir / "final", extra={"privacy": spec.certificate()})
    logger.info(f"Finished training: epsilon={spec.epsilon:.4f}, final loss={log[-1]['loss'] if log else math.nan}")
    return TrainResult(params, spec, log, final)


def train_dp(
    dataset: Dataset,
    config: TrainConfig,
    init: Optional[ModelParams] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """DP-SGD with per-group clipping; ``privacy.epsilon`` is the certified ε."""
    return _train(dataset, config, True, init, checkpoint_dir)


def train_sgd(
    dataset: Dataset,
    config: TrainConfig,
    init: Optional[ModelParams] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Plain SGD over the same batches, without clipping or noise."""
    return _train(dataset, config, False, init, checkpoint_dir)


def suggest_clip_bounds(dataset: Dataset, config: TrainConfig, steps: Optional[int] = None) -> ClipBounds:
    """Median per-group gradient norms seen during a short non-private pre-training pass."""
    _prepare(dataset, config)
    steps = steps or config.steps
    params = init_params(dataset.n1, dataset.n2, config.d, config.scorer, derive_rng(config.seed, "pretune"))
    seen: list[GroupNorms] = []
    tune_config = replace(config, bounds=ClipBounds.unbounded(), z=0.0, epsilon_target=None, checkpoint_every=0)
    _sgd_loop(dataset, tune_config, params, derive_rng(config.seed, "pretune"), None, 0.0, False, steps, on_norms=seen.append)
    if not seen:
        raise DataError("pre-training pass sampled no examples")

    def median(values: list[np.ndarray]) -> float:
        merged = np.concatenate(values)
        value = float(np.median(merged)) if merged.size else 0.0
        return value if value > 0 else 1e-6

    C_u = median([s.user for s in seen])
    C_v = median([s.item for s in seen])
    C_w = median([s.w for s in seen]) if config.scorer == "neumf" else C_v
    bounds = ClipBounds(C_u, C_v, C_w)
    logger.info(f"Suggested clip bounds: {bounds.as_dict()}")
    return bounds


def top_k_lists(
    params: ModelParams, dataset: Dataset, K: int, exclude: Sequence[str] = ("train", "validation")
) -> RecLists:
    """Top-K items per user outside the ``exclude`` splits, ranked by (−score, item index)."""
    if K < 1:
        raise ConfigError(f"K must be positive, got {K}")
    seen = dataset.matrix(tuple(exclude))
    items, scores, short = [], [], set()
    for u in range(dataset.n1):
        s = score_all(params, u)
        eligible = np.ones(dataset.n2, dtype=bool)
        eligible[seen.indices[seen.indptr[u]:seen.indptr[u + 1]]] = False
        cand = np.flatnonzero(eligible)
        order = np.lexsort((cand, -s[cand]))[:K]
        items.append(cand[order])
        scores.append(s[cand[order]])
        if len(order) < K:
            short.add(u)
    if short:
        logger.warning(f"{len(short)} users have fewer than K={K} eligible items; their lists are shorter")
    return RecLists(K=K, items=items, scores=scores, short=frozenset(short))
