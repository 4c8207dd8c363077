"""
Gradient sanitization and (ε, δ) accounting for DP-SGD.

Clipping is applied separately per parameter group (users, items and, for the
neural scorer, the extra weights W). One noise multiplier z is shared by all
groups with σ_g = z·C_g. The group-rescaled concatenation of one example has
L2 sensitivity √G, so the accountant is charged multiplier z/√G.

Accounting follows the Rényi DP analysis of the Poisson-subsampled Gaussian
mechanism over integer orders, computed with a log-space binomial series.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from scripts.dpfair.errors import PrivacyError
from scripts.dpfair.model import BatchGrads, PerExampleGrad

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 513))
CALIBRATION_BRACKET = (0.1, 1e4)
CALIBRATION_TOLERANCE = 1e-3
GROUPS_BY_SCORER = {"mf": 2, "neumf": 3}


@dataclass(frozen=True)
class ClipBounds:
    C_u: float
    C_v: float
    C_w: float

    def __post_init__(self):
        for name in ("C_u", "C_v", "C_w"):
            value = getattr(self, name)
            if not (value > 0):
                raise PrivacyError(f"clip bound {name} must be positive, got {value}")

    @classmethod
    def uniform(cls, C: float) -> "ClipBounds":
        return cls(C, C, C)

    @classmethod
    def unbounded(cls) -> "ClipBounds":
        return cls(math.inf, math.inf, math.inf)

    @property
    def is_finite(self) -> bool:
        return all(math.isfinite(c) for c in (self.C_u, self.C_v, self.C_w))

    def as_dict(self) -> dict:
        return {"C_u": self.C_u, "C_v": self.C_v, "C_w": self.C_w}


@dataclass(frozen=True)
class AccountantReport:
    epsilon: float
    optimal_order: Optional[int]
    noise_multiplier: float
    sampling_rate: float
    steps: int
    delta: float

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "optimal_order": self.optimal_order,
            "z": self.noise_multiplier,
            "q": self.sampling_rate,
            "T": self.steps,
            "delta": self.delta,
        }


@dataclass(frozen=True)
class PrivacySpec:
    """Realized privacy parameters of one training run.

    ``noise_multiplier`` is the z used for σ_g = z·C_g; ``accounting_multiplier``
    is the z/√G the accountant was charged with.
    """

    epsilon: float
    delta: float
    noise_multiplier: float
    sampling_rate: float
    steps: int
    groups: int = 2
    epsilon_target: Optional[float] = None
    optimal_order: Optional[int] = None
    accounting_multiplier: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")
        if self.noise_multiplier < 0:
            raise PrivacyError(f"noise multiplier must be nonnegative, got {self.noise_multiplier}")
        if not (0.0 < self.sampling_rate <= 1.0):
            raise PrivacyError(f"sampling rate must lie in (0, 1], got {self.sampling_rate}")
        if self.steps < 1:
            raise PrivacyError(f"steps must be positive, got {self.steps}")
        if self.accounting_multiplier is None:
            object.__setattr__(self, "accounting_multiplier", accounting_multiplier(self.noise_multiplier, self.groups))

    @property
    def is_private(self) -> bool:
        return self.noise_multiplier > 0

    def certificate(self) -> dict:
        return {
            "z": self.noise_multiplier,
            "accounting_z": self.accounting_multiplier,
            "q": self.sampling_rate,
            "T": self.steps,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "epsilon_target": self.epsilon_target,
            "optimal_order": self.optimal_order,
            "groups": self.groups,
        }


def accounting_multiplier(z: float, groups: int) -> float:
    return z / math.sqrt(groups)


def check_delta(delta: float, n: int):
    """δ must be well below 1/n for the guarantee to mean anything."""
    if not (delta < 1.0 / n):
        raise PrivacyError(f"delta={delta:.3g} is not below 1/n={1.0 / n:.3g}")


# ---------------------------------------------------------------------------
# Sanitization
# ---------------------------------------------------------------------------


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """g / max(1, ‖g‖₂ / C)."""
    if not (C > 0):
        raise PrivacyError(f"clip bound must be positive, got {C}")
    g = np.asarray(g, dtype=float)
    out = g / max(1.0, float(np.linalg.norm(g)) / C)
    # rounding may leave the norm a few ulps above C
    while float(np.linalg.norm(out)) > C:
        out = out * (1.0 - 4 * np.finfo(float).eps)
    return out


def clip_factors(norms: np.ndarray, C: float) -> np.ndarray:
    """Per-row scale factors 1 / max(1, norm / C)."""
    return 1.0 / np.maximum(1.0, norms / C)


def add_noise(g: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise PrivacyError(f"noise scale must be nonnegative, got {sigma}")
    g = np.asarray(g, dtype=float)
    if sigma == 0:
        return g.copy()
    return g + rng.normal(0.0, sigma, size=g.shape)


def _group_sigma(z: float, C: float) -> float:
    if z == 0:
        return 0.0
    if not math.isfinite(C):
        raise PrivacyError("an infinite clip bound is only allowed with z = 0")
    return z * C


def sanitize(grad: PerExampleGrad, bounds: ClipBounds, z: float, rng: np.random.Generator) -> PerExampleGrad:
    """Clip each group of one example gradient to its bound, then noise it with σ_g = z·C_g."""
    user = clip(grad.user_part, bounds.C_u)
    item = clip(grad.item_part, bounds.C_v)
    w = clip(grad.w_part, bounds.C_w) if grad.w_part.size else grad.w_part.copy()
    return PerExampleGrad(
        user_row=grad.user_row,
        user_part=add_noise(user, _group_sigma(z, bounds.C_u), rng),
        item_rows=grad.item_rows,
        item_part=add_noise(item, _group_sigma(z, bounds.C_v), rng),
        w_part=add_noise(w, _group_sigma(z, bounds.C_w), rng) if w.size else w,
    )


def clip_uniform(grad: PerExampleGrad, C: float) -> PerExampleGrad:
    """Vanilla DP-SGD clipping of the concatenated gradient."""
    return grad.with_flat(clip(grad.flat(), C))


@dataclass
class GroupNorms:
    user: np.ndarray
    item: np.ndarray
    w: np.ndarray


def group_norms(grads: BatchGrads) -> GroupNorms:
    return GroupNorms(
        user=np.linalg.norm(grads.user, axis=1),
        item=np.sqrt(np.einsum("bd,bd->b", grads.pos, grads.pos) + np.einsum("bd,bd->b", grads.neg, grads.neg)),
        w=np.linalg.norm(grads.w, axis=1) if grads.w.shape[1] else np.zeros(len(grads.loss)),
    )


def clip_batch(grads: BatchGrads, bounds: ClipBounds) -> tuple[BatchGrads, GroupNorms]:
    """Clip every example of a batch per group; returns clipped grads and the pre-clip norms."""
    norms = group_norms(grads)
    fu = clip_factors(norms.user, bounds.C_u)[:, None]
    fv = clip_factors(norms.item, bounds.C_v)[:, None]
    fw = clip_factors(norms.w, bounds.C_w)[:, None]
    clipped = BatchGrads(
        loss=grads.loss,
        user=grads.user * fu,
        pos=grads.pos * fv,
        neg=grads.neg * fv,
        w=grads.w * fw,
    )
    return clipped, norms


def noise_group_sums(
    sum_u: np.ndarray,
    sum_v: np.ndarray,
    sum_w: np.ndarray,
    bounds: ClipBounds,
    z: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Gaussian draw per coordinate of each group sum, drawn in the order users, items, W."""
    noisy_u = add_noise(sum_u, _group_sigma(z, bounds.C_u), rng)
    noisy_v = add_noise(sum_v, _group_sigma(z, bounds.C_v), rng)
    noisy_w = add_noise(sum_w, _group_sigma(z, bounds.C_w), rng) if sum_w.size else sum_w
    return noisy_u, noisy_v, noisy_w


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log A_α for integer α: log Σ_i C(α,i) q^i (1-q)^(α-i) exp((i²-i)/(2σ²))."""
    i = np.arange(alpha + 1, dtype=float)
    log_binom = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2.0 * sigma**2)
    return float(logsumexp(terms))


def rdp_orders(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    """Rényi divergence bound ρ(α) of one step of the subsampled Gaussian mechanism."""
    orders_arr = np.asarray(orders, dtype=float)
    if q == 1.0:
        return orders_arr / (2.0 * sigma**2)
    return np.array([_log_a_int(q, sigma, int(a)) / (a - 1) for a in orders])


def _validate_accounting(z: float, q: float, T: int, delta: float):
    if z < 0:
        raise PrivacyError(f"noise multiplier must be nonnegative, got {z}")
    if not (0.0 < q <= 1.0):
        raise PrivacyError(f"sampling rate must lie in (0, 1], got {q}")
    if T < 1:
        raise PrivacyError(f"steps must be positive, got {T}")
    if not (0.0 < delta < 1.0):
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")


def compute_epsilon(
    z: float, q: float, T: int, delta: float, orders: Sequence[int] = DEFAULT_ORDERS, warn_edge: bool = True
) -> AccountantReport:
    """ε = min_α [T·ρ(α) + log(1/δ)/(α-1)]. z = 0 is non-private and reports ε = inf."""
    _validate_accounting(z, q, T, delta)
    if z == 0:
        return AccountantReport(math.inf, None, z, q, int(T), delta)
    orders_arr = np.asarray(orders, dtype=float)
    rdp = T * rdp_orders(q, z, orders)
    eps = rdp + math.log(1.0 / delta) / (orders_arr - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    idx = int(np.argmin(eps))
    best = int(orders[idx])
    if warn_edge and idx in (0, len(orders) - 1) and math.isfinite(eps[idx]):
        logger.warning(f"Optimal RDP order {best} sits on the edge of the order grid")
    return AccountantReport(float(eps[idx]), best, z, q, int(T), delta)


def rdp_epsilon(z: float, q: float, T: int, delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    """Bare ε, without the order-grid edge warning; the calibration bisection calls this."""
    return compute_epsilon(z, q, T, delta, orders, warn_edge=False).epsilon


def calibrate_noise(epsilon_target: float, delta: float, q: float, T: int) -> float:
    """Smallest z in the bracket (to within the bisection tolerance) with ε(z) ≤ target."""
    if not (epsilon_target > 0):
        raise PrivacyError(f"epsilon target must be positive, got {epsilon_target}")
    lo, hi = CALIBRATION_BRACKET
    if rdp_epsilon(hi, q, T, delta) > epsilon_target:
        raise PrivacyError(
            f"epsilon target {epsilon_target} unreachable with z <= {hi} (q={q}, T={T}, delta={delta:.3g})"
        )
    if rdp_epsilon(lo, q, T, delta) <= epsilon_target:
        return lo
    while hi - lo > CALIBRATION_TOLERANCE:
        mid = 0.5 * (lo + hi)
        if rdp_epsilon(mid, q, T, delta) <= epsilon_target:
            hi = mid
        else:
            lo = mid
    logger.info(f"Calibrated z={hi:.4f} for epsilon={epsilon_target} (q={q:.4g}, T={T}, delta={delta:.3g})")
    return hi


def privacy_spec_for(
    z: Optional[float],
    epsilon_target: Optional[float],
    delta: float,
    q: float,
    T: int,
    groups: int,
) -> PrivacySpec:
    """Resolve the noise multiplier and certify ε for a run.

    With an ε target the accounted multiplier is calibrated first and z is set
    to √G times it; an infinite target means z = 0 and no accounting.
    """
    accounted = None
    if epsilon_target is not None:
        if math.isinf(epsilon_target):
            z = 0.0
        else:
            accounted = calibrate_noise(epsilon_target, delta, q, T)
            z = math.sqrt(groups) * accounted
    if z is None:
        raise PrivacyError("either a noise multiplier or an epsilon target is required")
    if accounted is None:
        accounted = accounting_multiplier(z, groups)
    report = compute_epsilon(accounted, q, T, delta)
    return PrivacySpec(
        accounting_multiplier=accounted,
        epsilon=report.epsilon,
        delta=delta,
        noise_multiplier=z,
        sampling_rate=q,
        steps=T,
        groups=groups,
        epsilon_target=epsilon_target,
        optimal_order=report.optimal_order,
    )
