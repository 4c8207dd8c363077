"""
Latent factor scorers and the BPR objective.

Parameters are Θ = (U, V, W): user embeddings, item embeddings and a flat
vector of extra scorer weights (empty for matrix factorization). Two scorers:

- ``mf``: f(u, v) = <z_u, z_v>
- ``neumf``: a small two-tower variant; a GMF path z_u * z_v and an MLP path
  [2d -> d -> d/2] with ReLU, read out jointly by one linear layer with bias

Gradients are computed in closed form, batched over examples, and exposed per
example so the privacy layer can clip user, item and W parts separately.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from scripts.dpfair.errors import ModelError
from scripts.utils.seed_utils import restore_rng, rng_state

logger = logging.getLogger(__name__)

SCORERS = ("mf", "neumf")
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NeuMFLayout:
    """Slices of the flat W vector for embedding dimension ``d``.

    Order: W1 (h1 x 2d), b1, W2 (h2 x h1), b2, w_gmf (d), w_mlp (h2), b_out.
    """

    d: int

    @property
    def h1(self) -> int:
        return self.d

    @property
    def h2(self) -> int:
        return max(1, self.d // 2)

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, h1, h2 = self.d, self.h1, self.h2
        return [
            ("W1", (h1, 2 * d)),
            ("b1", (h1,)),
            ("W2", (h2, h1)),
            ("b2", (h2,)),
            ("w_gmf", (d,)),
            ("w_mlp", (h2,)),
            ("b_out", (1,)),
        ]

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.shapes)

    def unpack(self, W: np.ndarray) -> dict[str, np.ndarray]:
        if W.shape != (self.size,):
            raise ModelError(f"W has {W.size} entries, NeuMF layout with d={self.d} needs {self.size}")
        out, offset = {}, 0
        for name, shape in self.shapes:
            count = int(np.prod(shape))
            out[name] = W[offset:offset + count].reshape(shape)
            offset += count
        return out

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], dtype=float).reshape(-1) for name, _ in self.shapes])


@dataclass
class ModelParams:
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    scorer: str = "mf"

    def __post_init__(self):
        if self.scorer not in SCORERS:
            raise ModelError(f"Unknown scorer '{self.scorer}', expected one of {SCORERS}")
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.W = np.asarray(self.W, dtype=float).reshape(-1)
        if self.U.ndim != 2 or self.V.ndim != 2:
            raise ModelError("U and V must be matrices")
        if self.U.shape[1] != self.V.shape[1]:
            raise ModelError(f"embedding widths differ: d1={self.U.shape[1]}, d2={self.V.shape[1]}")
        expected = 0 if self.scorer == "mf" else NeuMFLayout(self.d).size
        if self.W.size != expected:
            raise ModelError(f"{self.scorer} expects {expected} extra weights, got {self.W.size}")

    @property
    def d(self) -> int:
        return int(self.U.shape[1])

    @property
    def n1(self) -> int:
        return int(self.U.shape[0])

    @property
    def n2(self) -> int:
        return int(self.V.shape[0])

    def copy(self) -> "ModelParams":
        return ModelParams(self.U.copy(), self.V.copy(), self.W.copy(), self.scorer)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.U).all() and np.isfinite(self.V).all() and np.isfinite(self.W).all())


@dataclass(frozen=True)
class Triple:
    u: int
    v: int
    v_neg: int


@dataclass
class PerExampleGrad:
    """Gradient of one BPR summand; only row u of U and rows v, v' of V are touched."""

    user_row: int
    user_part: np.ndarray
    item_rows: tuple[int, int]
    item_part: np.ndarray  # (2, d): rows for v and v'
    w_part: np.ndarray

    @property
    def user_norm(self) -> float:
        return float(np.linalg.norm(self.user_part))

    @property
    def item_norm(self) -> float:
        return float(np.linalg.norm(self.item_part))

    @property
    def w_norm(self) -> float:
        return float(np.linalg.norm(self.w_part))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.user_part.reshape(-1), self.item_part.reshape(-1), self.w_part.reshape(-1)])

    def with_flat(self, flat: np.ndarray) -> "PerExampleGrad":
        d = self.user_part.size
        return PerExampleGrad(
            self.user_row,
            flat[:d].copy(),
            self.item_rows,
            flat[d:3 * d].reshape(2, d).copy(),
            flat[3 * d:].copy(),
        )

    def to_dense(self, n1: int, n2: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.user_part.size
        dU = np.zeros((n1, d))
        dV = np.zeros((n2, d))
        dU[self.user_row] = self.user_part
        np.add.at(dV, list(self.item_rows), self.item_part)
        return dU, dV, self.w_part.copy()


@dataclass
class BatchGrads:
    """Per-example BPR losses and gradients for a batch of triples."""

    loss: np.ndarray
    user: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    w: np.ndarray


class MFScorer:
    name = "mf"

    def forward_backward(self, params: ModelParams, users: np.ndarray, items: np.ndarray):
        zu, zv = params.U[users], params.V[items]
        scores = np.einsum("bd,bd->b", zu, zv)
        return scores, zv.copy(), zu.copy(), np.zeros((len(users), 0))

    def score_all(self, params: ModelParams, u: int) -> np.ndarray:
        return params.V @ params.U[u]


class NeuMFScorer:
    name = "neumf"

    def _forward(self, params: ModelParams, zu: np.ndarray, zv: np.ndarray):
        layout = NeuMFLayout(params.d)
        p = layout.unpack(params.W)
        g = zu * zv
        x = np.concatenate([zu, zv], axis=1)
        a1 = x @ p["W1"].T + p["b1"]
        r1 = np.maximum(a1, 0.0)
        a2 = r1 @ p["W2"].T + p["b2"]
        r2 = np.maximum(a2, 0.0)
        scores = g @ p["w_gmf"] + r2 @ p["w_mlp"] + p["b_out"][0]
        return scores, (layout, p, g, x, a1, r1, a2, r2)

    def forward_backward(self, params: ModelParams, users: np.ndarray, items: np.ndarray):
        zu, zv = params.U[users], params.V[items]
        scores, (layout, p, g, x, a1, r1, a2, r2) = self._forward(params, zu, zv)
        batch, d = zu.shape
        da2 = np.broadcast_to(p["w_mlp"], r2.shape) * (a2 > 0)
        dW2 = da2[:, :, None] * r1[:, None, :]
        da1 = (da2 @ p["W2"]) * (a1 > 0)
        dW1 = da1[:, :, None] * x[:, None, :]
        dx = da1 @ p["W1"]
        dzu = p["w_gmf"] * zv + dx[:, :d]
        dzv = p["w_gmf"] * zu + dx[:, d:]
        dW = np.concatenate(
            [
                dW1.reshape(batch, -1),
                da1,
                dW2.reshape(batch, -1),
                da2,
                g,
                r2,
                np.ones((batch, 1)),
            ],
            axis=1,
        )
        return scores, dzu, dzv, dW

    def score_all(self, params: ModelParams, u: int) -> np.ndarray:
        zu = np.broadcast_to(params.U[u], params.V.shape)
        scores, _ = self._forward(params, zu, params.V)
        return scores


_SCORERS = {"mf": MFScorer(), "neumf": NeuMFScorer()}


def get_scorer(name: str):
    try:
        return _SCORERS[name]
    except KeyError:
        raise ModelError(f"Unknown scorer '{name}', expected one of {SCORERS}") from None


def init_params(n1: int, n2: int, d: int, scorer: str, rng: np.random.Generator) -> ModelParams:
    """Embeddings ~ U[-1/sqrt(d), 1/sqrt(d)]; MLP weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases 0."""
    if d < 1:
        raise ModelError(f"embedding dimension must be positive, got {d}")
    bound = 1.0 / np.sqrt(d)
    U = rng.uniform(-bound, bound, size=(n1, d))
    V = rng.uniform(-bound, bound, size=(n2, d))
    if scorer == "mf":
        return ModelParams(U, V, np.zeros(0), "mf")
    layout = NeuMFLayout(d)
    parts = {}
    for name, shape in layout.shapes:
        if name.startswith("b"):
            parts[name] = np.zeros(shape)
            continue
        fan_in = shape[1] if len(shape) == 2 else d + layout.h2
        lim = 1.0 / np.sqrt(fan_in)
        parts[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(U, V, layout.pack(parts), scorer)


def _check_index(params: ModelParams, u: int, v: int):
    if not (0 <= u < params.n1):
        raise ModelError(f"user index {u} out of range [0, {params.n1})")
    if not (0 <= v < params.n2):
        raise ModelError(f"item index {v} out of range [0, {params.n2})")


def score(params: ModelParams, u: int, v: int) -> float:
    _check_index(params, u, v)
    scores, *_ = get_scorer(params.scorer).forward_backward(params, np.array([u]), np.array([v]))
    return float(scores[0])


def score_mf(params: ModelParams, u: int, v: int) -> float:
    _check_index(params, u, v)
    return float(params.U[u] @ params.V[v])


def score_neumf(params: ModelParams, u: int, v: int) -> float:
    if params.scorer != "neumf":
        raise ModelError("score_neumf needs parameters laid out for the neumf scorer")
    return score(params, u, v)


def score_all(params: ModelParams, u: int) -> np.ndarray:
    return get_scorer(params.scorer).score_all(params, u)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow; -log sigma(m) == softplus(-m)."""
    return np.logaddexp(0.0, x)


def batch_grads(
    params: ModelParams, users: np.ndarray, pos: np.ndarray, neg: np.ndarray, lam: float
) -> BatchGrads:
    """Per-example BPR losses and exact gradients for triples (users[i], pos[i], neg[i]).

    l = -log sigma(f(u,v) - f(u,v')) + lam/2 (|z_u|^2 + |z_v|^2 + |z_v'|^2 + |W|^2)
    """
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    scorer = get_scorer(params.scorer)
    fp, dzu_p, dzv_p, dW_p = scorer.forward_backward(params, users, pos)
    fn, dzu_n, dzv_n, dW_n = scorer.forward_backward(params, users, neg)
    margin = fp - fn
    zu, zp, zn = params.U[users], params.V[pos], params.V[neg]
    w_sq = float(params.W @ params.W)
    reg = 0.5 * lam * (
        np.einsum("bd,bd->b", zu, zu) + np.einsum("bd,bd->b", zp, zp) + np.einsum("bd,bd->b", zn, zn) + w_sq
    )
    loss = softplus(-margin) + reg
    coef = -expit(-margin)[:, None]
    return BatchGrads(
        loss=loss,
        user=coef * (dzu_p - dzu_n) + lam * zu,
        pos=coef * dzv_p + lam * zp,
        neg=-coef * dzv_n + lam * zn,
        w=coef * (dW_p - dW_n) + lam * params.W,
    )


def _validate_triple(params: ModelParams, triple: Triple):
    _check_index(params, triple.u, triple.v)
    _check_index(params, triple.u, triple.v_neg)
    if triple.v == triple.v_neg:
        raise ModelError("positive and negative item of a triple must differ")


def bpr_loss(params: ModelParams, triple: Triple, lam: float) -> float:
    _validate_triple(params, triple)
    grads = batch_grads(params, np.array([triple.u]), np.array([triple.v]), np.array([triple.v_neg]), lam)
    return float(grads.loss[0])


def per_example_grad(params: ModelParams, triple: Triple, lam: float) -> PerExampleGrad:
    _validate_triple(params, triple)
    grads = batch_grads(params, np.array([triple.u]), np.array([triple.v]), np.array([triple.v_neg]), lam)
    return PerExampleGrad(
        user_row=triple.u,
        user_part=grads.user[0],
        item_rows=(triple.v, triple.v_neg),
        item_part=np.stack([grads.pos[0], grads.neg[0]]),
        w_part=grads.w[0],
    )


def save_checkpoint(
    params: ModelParams,
    path: Union[str, Path],
    rng: Optional[np.random.Generator] = None,
    extra: Optional[dict] = None,
) -> Path:
    """Write ``<path>.npz`` (U, V, W) and ``<path>.json`` (metadata, RNG state)."""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, U=params.U, V=params.V, W=params.W)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "scorer": params.scorer,
        "d1": params.d,
        "d2": int(params.V.shape[1]),
        "n1": params.n1,
        "n2": params.n2,
        "layers": [2 * params.d, NeuMFLayout(params.d).h1, NeuMFLayout(params.d).h2] if params.scorer == "neumf" else [],
        "rng_state": rng_state(rng) if rng is not None else None,
        "extra": extra or {},
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.info(f"Saved {params.scorer} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelParams, dict, Optional[np.random.Generator]]:
    path = Path(path).with_suffix(".npz")
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise ModelError(f"Missing checkpoint files for {path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ModelError(f"Unsupported checkpoint schema version {meta.get('schema_version')!r}")
    with np.load(path) as arrays:
        params = ModelParams(arrays["U"], arrays["V"], arrays["W"], meta["scorer"])
    rng = restore_rng(meta["rng_state"]) if meta.get("rng_state") else None
    return params, meta, rng
