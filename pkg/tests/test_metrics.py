import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mplite.errors import ValidationError
from mplite.metrics import (MetricsReport, aggregate_runs, binary_f1, format_cell, mean_recall_at_k, recall_at_k,
                            report_table, roc_auc, task_metrics, top_k, weighted_f1)


# ---------------------------------------------------------------- oracles


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def recall_brute(scores, truth, k):
    # rank every index by (-score, index) using plain sorted()
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    pos = [i for i, t in enumerate(truth) if t]
    return sum(1 for i in ranked if truth[i]) / len(pos)


def wf1_brute(scores, truth, thr):
    n, m = len(scores), len(scores[0])
    total_support = 0
    acc = 0.0
    for j in range(m):
        tp = fp = fn = 0
        support = 0
        for i in range(n):
            p = scores[i][j] >= thr
            t = bool(truth[i][j])
            support += t
            tp += p and t
            fp += p and not t
            fn += (not p) and t
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        acc += support * f1
        total_support += support
    return acc / total_support


# ---------------------------------------------------------------- Recall@k


def test_recall_hand_example():
    scores = np.array([0.9, 0.1, 0.8, 0.3, 0.7])
    truth = np.array([1, 1, 0, 0, 1], dtype=bool)
    assert recall_at_k(scores, truth, 2) == pytest.approx(1 / 3)
    assert recall_at_k(scores, truth, 3) == pytest.approx(2 / 3)
    assert recall_at_k(scores, truth, 5) == 1.0


def test_recall_k_exceeds_vocab():
    scores = np.array([0.2, 0.1, 0.3])
    truth = np.array([1, 0, 1], dtype=bool)
    assert recall_at_k(scores, truth, 20) == 1.0


def test_recall_tie_break_ascending_index():
    scores = np.zeros(5)
    assert list(top_k(scores, 2)) == [0, 1]
    assert recall_at_k(scores, np.array([0, 0, 0, 1, 1], dtype=bool), 2) == 0.0
    assert recall_at_k(scores, np.array([1, 0, 0, 0, 1], dtype=bool), 2) == 0.5


def test_recall_uncapped_vs_capped():
    scores = np.arange(30, dtype=float)[::-1]
    truth = np.zeros(30, dtype=bool)
    truth[:15] = True
    assert recall_at_k(scores, truth, 10) == pytest.approx(10 / 15)
    assert recall_at_k(scores, truth, 10, capped=True) == 1.0


def test_recall_no_positive_is_skipped_and_counted():
    scores = np.array([[0.9, 0.1], [0.2, 0.8]])
    truth = np.array([[0, 0], [0, 1]], dtype=bool)
    assert math.isnan(recall_at_k(scores[0], truth[0], 1))
    c = Counter()
    assert mean_recall_at_k(scores, truth, 1, counter=c) == 1.0
    assert c["recall_skipped"] == 1
    with pytest.raises(ValidationError):
        mean_recall_at_k(scores, np.zeros_like(truth), 1)


def test_recall_random_against_brute_force():
    rng = random.Random(0)
    for _ in range(300):
        m = rng.randint(1, 25)
        scores = [rng.choice([0.0, 0.25, 0.5, 0.75, 1.0, rng.random()]) for _ in range(m)]
        truth = [rng.random() < 0.3 for _ in range(m)]
        if not any(truth):
            truth[rng.randrange(m)] = True
        k = rng.randint(1, 30)
        assert recall_at_k(np.array(scores), np.array(truth), k) == pytest.approx(recall_brute(scores, truth, k))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=40), st.integers(1, 45))
def test_recall_bounds_and_monotone(pairs, k):
    scores = np.array([p[0] for p in pairs])
    truth = np.array([p[1] for p in pairs])
    if not truth.any():
        return
    r = recall_at_k(scores, truth, k)
    assert 0.0 <= r <= 1.0
    assert recall_at_k(scores, truth, k + 1) >= r


# ---------------------------------------------------------------- weighted F1


def test_wf1_hand_example():
    scores = np.array([[0.9, 0.2, 0.6], [0.4, 0.7, 0.1], [0.8, 0.3, 0.5]])
    truth = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]], dtype=bool)
    # label 0: tp 2 -> F1 1, support 2; label 1: tp 1 fn 1 -> 2/3, support 2;
    # label 2: tp 1 fp 1 (0.5 >= 0.5) -> 2/3, support 1
    assert weighted_f1(scores, truth) == pytest.approx((2 * 1 + 2 * 2 / 3 + 1 * 2 / 3) / 5)


def test_wf1_threshold_is_inclusive():
    assert weighted_f1(np.array([[0.5]]), np.array([[True]])) == 1.0


def test_wf1_zero_support_label_ignored():
    scores = np.array([[0.9, 0.9], [0.1, 0.9]])
    truth = np.array([[1, 0], [0, 0]], dtype=bool)
    assert weighted_f1(scores, truth) == 1.0


def test_wf1_random_against_brute_force():
    rng = random.Random(1)
    for _ in range(250):
        n, m = rng.randint(1, 12), rng.randint(1, 8)
        scores = [[rng.choice([0.5, rng.random()]) for _ in range(m)] for _ in range(n)]
        truth = [[rng.random() < 0.4 for _ in range(m)] for _ in range(n)]
        if not any(map(any, truth)):
            truth[0][0] = True
        thr = rng.choice([0.5, 0.3, 0.7])
        assert weighted_f1(np.array(scores), np.array(truth), thr) == pytest.approx(wf1_brute(scores, truth, thr))


# ---------------------------------------------------------------- AUC / F1


def test_auc_hand_examples():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class():
    with pytest.raises(ValidationError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_random_against_pairwise():
    rng = random.Random(2)
    for _ in range(300):
        n = rng.randint(2, 40)
        scores = [rng.choice([0.1, 0.2, 0.5, rng.random()]) for _ in range(n)]
        labels = [rng.random() < 0.4 for _ in range(n)]
        labels[0], labels[1] = True, False
        assert roc_auc(scores, labels) == pytest.approx(auc_pairs(scores, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=30))
def test_auc_invariant_to_monotone_transform(pairs):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    a = roc_auc(scores, labels)
    assert 0.0 <= a <= 1.0
    dense_rank = np.searchsorted(np.unique(scores), scores).astype(float)  # exact strictly monotone map
    assert roc_auc(10 + 3 * dense_rank, labels) == a
    assert roc_auc(-scores, labels) == pytest.approx(1 - a)


def test_binary_f1():
    assert binary_f1([0.9, 0.6, 0.2, 0.5], [1, 0, 1, 1]) == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
    with pytest.warns(UserWarning):
        assert binary_f1([0.1, 0.2], [0, 0]) == 0.0


def test_task_metrics_keys():
    s = np.array([[0.9, 0.1], [0.2, 0.8]])
    t = np.array([[1, 0], [0, 1]], dtype=bool)
    assert set(task_metrics("dg", s, t)) == {"w_f1", "r_at_10", "r_at_20"}
    assert set(task_metrics("hf", [0.2, 0.9], [0, 1])) == {"auc", "f1"}
    with pytest.raises(ValidationError):
        task_metrics("xx", s, t)


# ---------------------------------------------------------------- aggregation


def test_aggregate_sample_std():
    rep = aggregate_runs([{"auc": 0.80}, {"auc": 0.84}, {"auc": 0.82}], [2, 0, 1])
    assert rep.mean["auc"] == pytest.approx(0.82)
    assert rep.std["auc"] == pytest.approx(0.02)
    assert rep.seeds == [0, 1, 2]
    assert rep.per_run[0] == {"auc": 0.84}


def test_aggregate_single_run():
    rep = aggregate_runs([{"f1": 0.5}])
    assert rep.single_run and rep.std["f1"] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.randoms())
def test_aggregate_order_independent(vals, rnd):
    runs = [{"m": v} for v in vals]
    seeds = list(range(len(vals)))
    a = aggregate_runs(runs, seeds)
    idx = list(range(len(vals)))
    rnd.shuffle(idx)
    b = aggregate_runs([runs[i] for i in idx], [seeds[i] for i in idx])
    assert a.to_dict() == b.to_dict()
    if len(vals) > 1:
        assert a.std["m"] == pytest.approx(float(np.std(vals, ddof=1)), abs=1e-12)


def test_report_roundtrip_and_format():
    rep = aggregate_runs([{"w_f1": 0.1782, "r_at_10": 0.3}, {"w_f1": 0.1782, "r_at_10": 0.3}])
    assert MetricsReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()
    assert format_cell(0.1782, 0.0043) == "17.82 (0.43)"
    text = report_table(rep, "GRU")
    assert "w-F1" in text and "R@10" in text and "17.82 (0.00)" in text
