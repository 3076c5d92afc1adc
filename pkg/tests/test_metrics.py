import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rano_response.evaluation.metrics import (
    ConfusionMatrix,
    MetricsReport,
    balanced_accuracy,
    compute_metrics,
    confusion,
    f1_from,
    recall_precision_f1,
)


def tally_oracle(preds, truths, k=4):
    m = [[0] * k for _ in range(k)]
    for p, t in zip(preds, truths):
        m[t][p] += 1
    return m


def metric_oracle(m):
    """Nested-loop per-class recall/precision, support-weighted averages."""
    k = len(m)
    n = sum(sum(row) for row in m)
    recalls, precisions, supports = [], [], []
    for i in range(k):
        tp = m[i][i]
        fn = sum(m[i][j] for j in range(k) if j != i)
        fp = sum(m[j][i] for j in range(k) if j != i)
        supports.append(tp + fn)
        recalls.append(tp / (tp + fn) if tp + fn else None)
        precisions.append(tp / (tp + fp) if tp + fp else 0.0)
    present = [i for i in range(k) if supports[i]]
    bacc = sum(recalls[i] for i in present) / len(present)
    rec = sum(recalls[i] * supports[i] / n for i in present)
    prec = sum(precisions[i] * supports[i] / n for i in present)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return bacc, rec, prec, f1


def test_confusion_examples():
    cm = confusion([0, 1, 2, 3], [0, 1, 2, 3])
    np.testing.assert_array_equal(cm.counts, np.eye(4))
    truths = [0] * 67 + [1] * 20 + [2] * 6 + [3] * 7
    cm = confusion([0] * 100, truths)
    assert cm.counts[:, 0].sum() == 100 and cm.counts[:, 1:].sum() == 0
    with pytest.raises(ValueError):
        confusion([0, 1], [0])
    with pytest.raises(ValueError):
        confusion([4], [0])


def test_confusion_matches_tally(rng):
    for _ in range(50):
        n = int(rng.integers(1, 60))
        p, t = rng.integers(0, 4, n), rng.integers(0, 4, n)
        cm = confusion(p, t)
        assert cm.counts.tolist() == tally_oracle(p, t)
        assert cm.total == n
        np.testing.assert_array_equal(cm.support, np.bincount(t, minlength=4))


def test_thousand_random_matrices_match_oracle(rng):
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(1000):
            m = rng.integers(0, 20, (4, 4))
            m[rng.integers(0, 4)] *= rng.integers(0, 2)  # sometimes an empty class
            if m.sum() == 0:
                m[0, 0] = 1
            cm = ConfusionMatrix(m)
            bacc, rec, prec, f1 = metric_oracle(m.tolist())
            r, p, f = recall_precision_f1(cm)
            assert abs(balanced_accuracy(cm) - bacc) <= 1e-12
            assert abs(r - rec) <= 1e-12 and abs(p - prec) <= 1e-12 and abs(f - f1) <= 1e-12
    assert time.perf_counter() - t0 < 5


def test_diagonal_gives_ones():
    cm = ConfusionMatrix(np.diag([3, 5, 1, 2]))
    assert balanced_accuracy(cm) == 1.0
    assert recall_precision_f1(cm) == (1.0, 1.0, 1.0)


def test_always_pd_is_chance():
    truths = [0, 1, 2, 3] * 25
    rep = compute_metrics([0] * 100, truths)
    assert rep.balanced_accuracy == 0.25


def test_two_class_example():
    cm = ConfusionMatrix(np.array([[8, 2, 0, 0], [3, 7, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]))
    r, p, _ = recall_precision_f1(cm)
    assert r == pytest.approx(0.75, abs=1e-15)
    assert p == pytest.approx((8 / 11 * 10 + 7 / 9 * 10) / 20, abs=1e-15)
    assert balanced_accuracy(cm) == pytest.approx(0.75)


def test_f1_arithmetic():
    assert f1_from(0.6, 0.3) == pytest.approx(0.4, abs=1e-15)
    with pytest.warns(UserWarning):
        assert f1_from(0.0, 0.0) == 0.0


def test_empty_matrix_raises():
    with pytest.raises(ValueError):
        balanced_accuracy(ConfusionMatrix(np.zeros((4, 4), dtype=int)))


def test_literal_mode_weights_by_inverse_support():
    cm = ConfusionMatrix(np.array([[8, 2, 0, 0], [3, 7, 0, 0], [0] * 4, [0] * 4]))
    r, _, _ = recall_precision_f1(cm, literal=True)
    assert r == pytest.approx(0.8 / 10 + 0.7 / 10)


def test_report_aggregate_and_round_trip():
    folds = [MetricsReport(v, v, v, v) for v in (0.1, 0.5, 0.3, 0.9, 0.2)]
    agg = MetricsReport.aggregate(folds)
    assert agg.balanced_accuracy == 0.3
    assert MetricsReport.from_dict(agg.to_dict()) == agg


preds_truths = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 3), min_size=n, max_size=n), st.lists(st.integers(0, 3), min_size=n, max_size=n))
)


@settings(max_examples=150, deadline=None)
@given(preds_truths, st.randoms(use_true_random=False), st.integers(2, 4), st.integers(0, 3))
def test_metric_properties(pt, rnd, k, cls):
    preds, truths = pt
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = compute_metrics(preds, truths)
        for v in rep.as_dict().values():
            assert 0.0 <= v <= 1.0
        order = list(range(len(preds)))
        rnd.shuffle(order)
        shuffled = compute_metrics([preds[i] for i in order], [truths[i] for i in order])
        assert shuffled.as_dict() == pytest.approx(rep.as_dict(), abs=1e-12)
        extra = [(p, t) for p, t in zip(preds, truths) if t == cls] * (k - 1)
        if extra:
            dup = compute_metrics(preds + [p for p, _ in extra], truths + [t for _, t in extra])
            assert dup.balanced_accuracy == pytest.approx(rep.balanced_accuracy, abs=1e-12)
