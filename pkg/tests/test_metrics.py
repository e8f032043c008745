import csv

import numpy as np
import pytest

from src.boottod.errors import DataError
from src.boottod.metrics import (
    MetricsReport,
    f1_metrics,
    intent_metrics,
    k_to_100,
    label_f1,
    multilabel_counts,
    rank_of_truth,
)


def brute_force_f1(y_true, y_pred):
    """Definition-following loops over labels"""
    num_labels = len(y_true[0])
    per_label, pooled = [], [0, 0, 0]
    for j in range(num_labels):
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            tp += t[j] and p[j]
            fp += (not t[j]) and p[j]
            fn += t[j] and not p[j]
        pooled = [pooled[0] + tp, pooled[1] + fp, pooled[2] + fn]
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_label.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    tp, fp, fn = pooled
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    micro = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return micro, sum(per_label) / num_labels


# F1
def test_single_perfect_label():
    result = f1_metrics([(1, 0, 0)])
    assert (result.micro_f1, result.macro_f1) == (1.0, 1.0)


def test_two_act_hand_case():
    result = f1_metrics({"A": (2, 1, 1), "B": (1, 0, 1)})
    assert result.micro_f1 == pytest.approx(2 / 3)
    assert result.macro_f1 == pytest.approx(2 / 3)


def test_multilabel_example():
    # labels a, b, c; gold [[a, b, c], [a]] predicted as [[b, c], [b]]
    y_true = np.array([[1, 1, 1], [1, 0, 0]])
    y_pred = np.array([[0, 1, 1], [0, 1, 0]])
    result = f1_metrics(multilabel_counts(y_true, y_pred))
    assert result.macro_f1 == pytest.approx(0.556, abs=1e-3)
    assert result.micro_f1 == pytest.approx(0.571, abs=1e-3)


def test_all_negative_predictions_score_zero():
    result = f1_metrics(multilabel_counts(np.ones((3, 2)), np.zeros((3, 2))))
    assert result.micro_f1 == 0.0 and not result.degenerate


def test_all_zero_counts_flagged():
    result = f1_metrics([(0, 0, 0), (0, 0, 0)])
    assert (result.micro_f1, result.macro_f1, result.degenerate) == (0.0, 0.0, True)


def test_negative_counts_rejected():
    with pytest.raises(DataError):
        f1_metrics([(1, -1, 0)])


def test_label_f1_zero_over_zero():
    assert label_f1(0, 0, 0) == 0.0


def test_f1_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, labels = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        y_true = rng.random((n, labels)) < 0.4
        y_pred = rng.random((n, labels)) < 0.4
        result = f1_metrics(multilabel_counts(y_true, y_pred))
        micro, macro = brute_force_f1(y_true.tolist(), y_pred.tolist())
        assert result.micro_f1 == pytest.approx(micro, abs=1e-12)
        assert result.macro_f1 == pytest.approx(macro, abs=1e-12)


# Intent accuracy
def test_intent_hand_confusion_table():
    y_true = ["a"] * 12 + ["out"] * 4
    y_pred = ["a"] * 10 + ["b"] * 2 + ["out"] * 3 + ["a"]
    metrics = intent_metrics(y_true, y_pred)
    assert metrics["acc_all"] == pytest.approx(13 / 16)
    assert metrics["acc_in"] == pytest.approx(10 / 12)
    assert metrics["recall_out"] == pytest.approx(0.75)
    assert metrics["acc_out"] == pytest.approx(15 / 16)


def test_intent_perfect_predictions():
    labels = ["a", "b", "out"]
    assert set(intent_metrics(labels, labels).values()) == {1.0}


def test_intent_without_ood_examples_reports_absent():
    metrics = intent_metrics(["a", "b"], ["a", "a"])
    assert metrics["acc_out"] is None and metrics["recall_out"] is None
    assert metrics["acc_all"] == 0.5


# Ranking
def test_truth_far_ahead_is_top_one():
    scores = [0.9] + list(np.linspace(0.0, 0.5, 99))
    assert rank_of_truth(scores, 0) == 1


def test_ties_go_to_lower_index():
    assert rank_of_truth([0.3, 0.3, 0.3], 0) == 1
    assert rank_of_truth([0.3, 0.3, 0.3], 2) == 3


def test_k_to_100_monotone_and_complete():
    rng = np.random.default_rng(1)
    ranks = [rank_of_truth(rng.random(100), int(rng.integers(100))) for _ in range(200)]
    rates = [k_to_100(ranks, k) for k in range(1, 101)]
    assert rates == sorted(rates)
    assert rates[-1] == 1.0


def test_random_scores_hit_top_one_at_chance():
    rng = np.random.default_rng(2)
    ranks = [rank_of_truth(rng.random(100), 0) for _ in range(4000)]
    assert k_to_100(ranks, 1) == pytest.approx(0.01, abs=0.005)
    assert k_to_100(ranks, 3) == pytest.approx(0.03, abs=0.01)


# Reports
def test_report_rejects_out_of_range_rates():
    with pytest.raises(DataError):
        MetricsReport("intent", {"acc_all": 1.5})
    with pytest.raises(DataError):
        MetricsReport("response-selection", {"1_to_100": -0.1})


def test_report_csv_writes_absent_as_empty(tmp_path):
    report = MetricsReport("intent", {"acc_all": 0.5, "acc_out": None})
    with open(report.save_csv(tmp_path / "report.csv"), newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [["task", "metric", "value"], ["intent", "acc_all", "0.5"], ["intent", "acc_out", ""]]
