import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from scripts.dpfair.data import Dataset, UserGroups
from scripts.dpfair.errors import MetricsError
from scripts.dpfair.metrics import (
    REPORT_COLUMNS,
    evaluate_lists,
    f1_at_k,
    group_means,
    ndcg_at_k,
    per_user_values,
    precision_at_k,
    recall_at_k,
    relevance_labels,
    report_frame,
    ugf,
)

GROUPS = UserGroups(active=frozenset({0, 1}), inactive=frozenset({2, 3}))


class TestPerUserMetrics:
    def test_ndcg_by_hand(self):
        expected = (1 / math.log2(3) + 1 / math.log2(4)) / (1 + 1 / math.log2(3))
        assert ndcg_at_k([1, 2, 3], frozenset({2, 3}), 3) == pytest.approx(expected)

    def test_ndcg_perfect_and_zero(self):
        assert ndcg_at_k([4, 5], frozenset({4, 5, 6}), 2) == pytest.approx(1.0)
        assert ndcg_at_k([1, 2], frozenset({9}), 2) == 0.0

    def test_f1_precision_recall(self):
        ranked, relevant = [1, 2, 3], frozenset({2, 3})
        assert f1_at_k(ranked, relevant, 3) == pytest.approx(0.8)
        assert precision_at_k(ranked, relevant, 3) == pytest.approx(2 / 3)
        assert recall_at_k(ranked, relevant, 3) == pytest.approx(1.0)

    def test_f1_is_harmonic_mean(self):
        ranked, relevant = [7, 1, 8, 2], frozenset({1, 2, 3})
        p, r = precision_at_k(ranked, relevant, 4), recall_at_k(ranked, relevant, 4)
        assert f1_at_k(ranked, relevant, 4) == pytest.approx(2 * p * r / (p + r))

    def test_only_the_first_k_count(self):
        assert precision_at_k([1, 2, 3], frozenset({3}), 2) == 0.0

    @pytest.mark.parametrize("fn", [ndcg_at_k, f1_at_k, precision_at_k, recall_at_k])
    def test_undefined_without_relevant_items(self, fn):
        assert fn([1, 2], frozenset(), 2) is None

    def test_bad_inputs(self):
        with pytest.raises(MetricsError):
            ndcg_at_k([1], frozenset({1}), 0)
        with pytest.raises(MetricsError):
            f1_at_k([1, 1], frozenset({1}), 2)


class TestGroupGap:
    def test_means_skip_undefined_users(self):
        per_user = [1.0, None, 0.5, 0.0]
        assert group_means(per_user, GROUPS) == (1.0, 0.25)
        assert ugf(per_user, GROUPS) == pytest.approx(0.75)

    def test_gap_is_symmetric(self):
        assert ugf([0.0, 0.0, 1.0, 1.0], GROUPS) == pytest.approx(1.0)

    def test_group_without_evaluable_users(self):
        with pytest.raises(MetricsError):
            ugf([None, None, 0.5, 0.5], GROUPS)
        with pytest.raises(MetricsError):
            ugf([0.5, 0.5, None, None], GROUPS)


class TestEvaluateLists:
    @pytest.fixture
    def dataset(self):
        train = np.array([[u, 0] for u in range(4)])
        test = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [3, 5]])
        return Dataset(4, 6, train, np.empty((0, 2), dtype=np.int64), test)

    def test_report_by_hand(self, dataset):
        labels = relevance_labels(dataset, "test")
        lists = [np.array([1, 5]), np.array([3, 4]), np.array([3, 1]), np.array([4, 5])]
        f1 = per_user_values(lists, labels, 2, "f1")
        assert f1 == pytest.approx([2 / 3, 0.0, 2 / 3, 1.0])
        reports = {r.metric: r for r in evaluate_lists(lists, labels, GROUPS, 2)}
        assert reports["f1"].total == pytest.approx(7 / 12)
        assert reports["f1"].active == pytest.approx(1 / 3)
        assert reports["f1"].inactive == pytest.approx(5 / 6)
        assert reports["f1"].gap == pytest.approx(0.5)
        assert reports["f1"].evaluated == 4
        row = reports["f1"].as_row()
        assert row == {"metric": "F1@2", "total": 58.33, "active": 33.33, "inactive": 83.33, "gap": 50.0}

    def test_frame_layout(self, dataset):
        labels = relevance_labels(dataset, "test")
        lists = [np.array([1, 2])] * 4
        df = report_frame(evaluate_lists(lists, labels, GROUPS, 2), "synthetic", "mf", "DP-SGD", 2.0)
        assert list(df.columns) == REPORT_COLUMNS
        assert df["metric"].tolist() == ["NDCG@2", "F1@2"]

    def test_lists_must_cover_every_user(self, dataset):
        with pytest.raises(MetricsError):
            per_user_values([np.array([1])], relevance_labels(dataset, "test"), 1, "f1")

    def test_unknown_metric(self, dataset):
        with pytest.raises(MetricsError):
            per_user_values([np.array([1])] * 4, relevance_labels(dataset, "test"), 1, "map")


def test_f1_identity_over_all_small_cases():
    for k in range(1, 21):
        for t in range(1, 21):
            for h in range(0, min(k, t) + 1):
                p, r = Fraction(h, k), Fraction(h, t)
                harmonic = 2 * p * r / (p + r) if h else Fraction(0)
                assert harmonic == Fraction(2 * h, k + t)


def test_ndcg_matches_definition_exhaustively():
    catalogue = range(5)
    for ranked in itertools.permutations(catalogue, 3):
        for size in range(1, 4):
            for relevant in itertools.combinations(catalogue, size):
                rel = frozenset(relevant)
                for k in range(1, 4):
                    gains = np.array([item in rel for item in ranked[:k]], dtype=float)
                    discounts = 1.0 / np.log2(np.arange(2, k + 2))
                    ideal = discounts[: min(k, len(rel))].sum()
                    assert ndcg_at_k(list(ranked), rel, k) == pytest.approx(gains @ discounts / ideal)
