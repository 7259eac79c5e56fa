import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmae import errors
from ctmae import evaluation as E
from ctmae.training import binary_merge


def brute_balanced_accuracy(y_true, y_pred):
    recalls = []
    for c in sorted(set(y_true)):
        idx = [i for i, y in enumerate(y_true) if y == c]
        recalls.append(sum(y_pred[i] == c for i in idx) / len(idx))
    return sum(recalls) / len(recalls)


def brute_weighted_f1(y_true, y_pred, C):
    total = 0.0
    for c in range(C):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += (tp + fn) / len(y_true) * f1
    return total


def expand(cm):
    y_true, y_pred = [], []
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            y_true += [i] * int(cm[i, j])
            y_pred += [j] * int(cm[i, j])
    return y_true, y_pred


def test_metric_examples():
    assert E.balanced_accuracy(np.diag([3, 4, 5])) == 1.0
    cm = np.array([[9, 1], [4, 6]])
    assert E.balanced_accuracy(cm) == pytest.approx(0.75)
    assert E.weighted_f1(cm) == pytest.approx(0.744, abs=1e-3)
    assert E.weighted_f1(np.diag([5, 5])) == 1.0
    assert E.weighted_f1(np.array([[10, 0], [10, 0]])) == pytest.approx(1 / 3)


def test_zero_support_excluded():
    cm = np.array([[5, 0, 0], [0, 0, 0], [1, 0, 3]])
    assert E.balanced_accuracy(cm) == pytest.approx((1 + 0.75) / 2)


def test_chance_level():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 5000)
    cm = E.confusion_matrix(y, rng.integers(0, 4, y.size), 4)
    assert E.balanced_accuracy(cm) == pytest.approx(0.25, abs=0.01)


def test_confusion_matrix_errors():
    with pytest.raises(errors.LabelOutOfRange):
        E.confusion_matrix([0, 4], [0, 1], 4)
    with pytest.raises(errors.ConfigError):
        E.confusion_matrix([0], [0, 1], 4)


def test_random_matrices_against_oracles():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        C = int(rng.integers(2, 6))
        cm = rng.integers(0, 8, size=(C, C))
        if cm.sum() == 0:
            continue
        yt, yp = expand(cm)
        assert np.array_equal(E.confusion_matrix(yt, yp, C), cm)
        assert abs(E.balanced_accuracy(cm) - brute_balanced_accuracy(yt, yp)) <= 1e-9
        assert abs(E.weighted_f1(cm) - brute_weighted_f1(yt, yp, C)) <= 1e-9


def test_sklearn_agreement():
    sk = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(3)
    for _ in range(50):
        yt, yp = rng.integers(0, 4, 40), rng.integers(0, 4, 40)
        cm = E.confusion_matrix(yt, yp, 4)
        if (cm.sum(axis=1) == 0).any():
            continue
        assert E.balanced_accuracy(cm) == pytest.approx(sk.balanced_accuracy_score(yt, yp), abs=1e-12)
        assert E.weighted_f1(cm) == pytest.approx(
            sk.f1_score(yt, yp, average="weighted", labels=range(4), zero_division=0), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5).flatmap(lambda C: st.lists(st.integers(0, 20), min_size=C * C, max_size=C * C)
                                 .map(lambda v: np.array(v).reshape(C, C))))
def test_metric_range_and_permutation(cm):
    if cm.sum() == 0:
        return
    for m in (E.balanced_accuracy, E.weighted_f1):
        assert 0.0 <= m(cm) <= 1.0
        perm = np.random.default_rng(int(cm.sum())).permutation(cm.shape[0])
        assert m(cm[np.ix_(perm, perm)]) == pytest.approx(m(cm), abs=1e-12)


def test_merge_then_score():
    rng = np.random.default_rng(2)
    yt, yp = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    bt, bp = binary_merge(yt), binary_merge(yp)
    cm4 = E.confusion_matrix(yt, yp, 4)
    merged = np.array([[cm4[:2, :2].sum(), cm4[:2, 2:].sum()], [cm4[2:, :2].sum(), cm4[2:, 2:].sum()]])
    assert np.array_equal(E.confusion_matrix(bt, bp, 2), merged)
    assert E.balanced_accuracy(E.confusion_matrix(bt, bp, 2)) == E.balanced_accuracy(merged)


def test_split_counts_reference_cohort():
    assert E.class_train_counts([27, 21, 18, 39]) == [19, 15, 13, 27]
    labels = [0] * 27 + [1] * 21 + [2] * 18 + [3] * 39
    plan = E.make_splits(labels)
    assert len(plan) == 5 and [s.seed for s in plan] == [0, 1, 2, 3, 4]
    for s in plan:
        assert len(s.train) == 74 and len(s.val) == 31


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=4, max_size=120), st.integers(0, 1000))
def test_split_properties(labels, seed):
    plan = E.make_splits(labels, seed)
    labels = np.array(labels)
    for s in plan:
        assert not set(s.train) & set(s.val)
        assert sorted(s.train + s.val) == list(range(len(labels)))
        for c in np.unique(labels):
            n_c = int((labels == c).sum())
            n_val = int((labels[list(s.val)] == c).sum())
            assert abs(n_val - 0.3 * n_c) <= 1 + (c == np.argmax(np.bincount(labels)))
    assert E.make_splits(labels.tolist(), seed) == plan


def test_aggregate():
    assert E.aggregate([0.5] * 5) == (0.5, 0.0)
    m, s = E.aggregate([0, 1])
    assert m == 0.5 and s == pytest.approx(np.sqrt(0.5))
    v = np.random.default_rng(0).random(5)
    mean = sum(v) / 5
    std = (sum((x - mean) ** 2 for x in v) / 4) ** 0.5
    assert E.aggregate(v) == pytest.approx((mean, std), rel=1e-12)


def test_report_format():
    res = [E.SplitResult(i, 0.5 + i / 10, 0.4, 1.0, 1.0) for i in range(5)]
    lines = E.format_report(res).splitlines()
    assert len(lines) == 7 and lines[0].startswith("split,")
    assert lines[-1].startswith("mean ± std,")
    assert len(lines[1].split(",")) == 4
