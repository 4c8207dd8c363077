"""
Ranking metrics and the user-group fairness gap.

Per-user metrics return ``None`` when the user has no relevant items in the
evaluation split; such users are left out of every mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from scripts.dpfair.data import Dataset, UserGroups
from scripts.dpfair.errors import MetricsError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["dataset", "scorer", "algorithm", "epsilon", "metric", "total", "active", "inactive", "gap"]


@dataclass(frozen=True)
class RelevanceLabels:
    split: str
    sets: tuple

    def for_user(self, u: int) -> frozenset:
        return self.sets[u]

    @property
    def n1(self) -> int:
        return len(self.sets)


def relevance_labels(dataset: Dataset, split: str) -> RelevanceLabels:
    m = dataset.matrix((split,))
    sets = tuple(frozenset(m.indices[m.indptr[u]:m.indptr[u + 1]].tolist()) for u in range(dataset.n1))
    return RelevanceLabels(split=split, sets=sets)


def _check(ranked: Sequence[int], k: int):
    if k < 1:
        raise MetricsError(f"k must be positive, got {k}")
    head = list(ranked)
    if len(set(head)) != len(head):
        raise MetricsError("ranked list contains duplicate items")


def hits_at_k(ranked: Sequence[int], relevant: frozenset, k: int) -> int:
    return sum(1 for item in list(ranked)[:k] if item in relevant)


def ndcg_at_k(ranked: Sequence[int], relevant: frozenset, k: int) -> Optional[float]:
    _check(ranked, k)
    if not relevant:
        return None
    dcg = sum(1.0 / math.log2(i + 2) for i, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return dcg / idcg


def f1_at_k(ranked: Sequence[int], relevant: frozenset, k: int) -> Optional[float]:
    """2·hits / (k + |T_u|), the harmonic mean of precision@k and recall@k."""
    _check(ranked, k)
    if not relevant:
        return None
    return 2.0 * hits_at_k(ranked, relevant, k) / (k + len(relevant))


def precision_at_k(ranked: Sequence[int], relevant: frozenset, k: int) -> Optional[float]:
    _check(ranked, k)
    if not relevant:
        return None
    return hits_at_k(ranked, relevant, k) / k


def recall_at_k(ranked: Sequence[int], relevant: frozenset, k: int) -> Optional[float]:
    _check(ranked, k)
    if not relevant:
        return None
    return hits_at_k(ranked, relevant, k) / len(relevant)


METRICS: dict[str, Callable[[Sequence[int], frozenset, int], Optional[float]]] = {
    "ndcg": ndcg_at_k,
    "f1": f1_at_k,
    "precision": precision_at_k,
    "recall": recall_at_k,
}


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def group_means(per_user: Sequence[Optional[float]], groups: UserGroups) -> tuple[float, float]:
    active = [per_user[u] for u in sorted(groups.active) if per_user[u] is not None]
    inactive = [per_user[u] for u in sorted(groups.inactive) if per_user[u] is not None]
    if not active:
        raise MetricsError("active group has no evaluable users")
    if not inactive:
        raise MetricsError("inactive group has no evaluable users")
    return _mean(active), _mean(inactive)


def ugf(per_user: Sequence[Optional[float]], groups: UserGroups) -> float:
    """|mean over active − mean over inactive|, each over users with a defined metric."""
    a, b = group_means(per_user, groups)
    return abs(a - b)


@dataclass(frozen=True)
class MetricsReport:
    metric: str
    k: int
    total: float
    active: float
    inactive: float
    gap: float
    evaluated: int

    def as_row(self) -> dict:
        """Percentages with two decimals."""
        return {
            "metric": f"{self.metric.upper()}@{self.k}",
            "total": round(100 * self.total, 2),
            "active": round(100 * self.active, 2),
            "inactive": round(100 * self.inactive, 2),
            "gap": round(100 * self.gap, 2),
        }


def per_user_values(lists, labels: RelevanceLabels, k: int, metric: str) -> list[Optional[float]]:
    fn = METRICS.get(metric)
    if fn is None:
        raise MetricsError(f"unknown metric '{metric}', expected one of {sorted(METRICS)}")
    items = getattr(lists, "items", lists)
    if len(items) != labels.n1:
        raise MetricsError(f"{len(items)} lists for {labels.n1} users")
    return [fn(np.asarray(items[u]).tolist(), labels.for_user(u), k) for u in range(labels.n1)]


def evaluate_lists(
    lists,
    labels: RelevanceLabels,
    groups: UserGroups,
    k: int,
    metrics: Sequence[str] = ("ndcg", "f1"),
) -> list[MetricsReport]:
    """Total / active / inactive means and the gap per metric."""
    reports = []
    for name in metrics:
        values = per_user_values(lists, labels, k, name)
        defined = [v for v in values if v is not None]
        if not defined:
            raise MetricsError(f"no user has relevant items in split '{labels.split}'")
        active, inactive = group_means(values, groups)
        reports.append(
            MetricsReport(
                metric=name,
                k=k,
                total=_mean(defined),
                active=active,
                inactive=inactive,
                gap=abs(active - inactive),
                evaluated=len(defined),
            )
        )
        skipped = len(values) - len(defined)
        logger.info(
            f"{name}@{k}: total={reports[-1].total:.4f} gap={reports[-1].gap:.4f} "
            f"({len(defined)} users evaluated, {skipped} skipped)"
        )
    return reports


def report_frame(
    reports: Sequence[MetricsReport], dataset: str, scorer: str, algorithm: str, epsilon: float
) -> pd.DataFrame:
    rows = [{"dataset": dataset, "scorer": scorer, "algorithm": algorithm, "epsilon": epsilon, **r.as_row()} for r in reports]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
