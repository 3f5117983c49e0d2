import numpy as np
import pytest

from skelzsl.metrics import (
    build_report,
    classwise_delta,
    confusion_matrix,
    gzsl_metrics,
    top1_accuracy,
)
from skelzsl.tensor_io import ClassSplit


def test_top1_all_correct():
    assert top1_accuracy([1, 2, 3], [1, 2, 3]) == 1.0


def test_top1_two_thirds():
    assert top1_accuracy(["a", "a", "a"], ["a", "b", "a"]) == pytest.approx(2 / 3)


def test_top1_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        top1_accuracy([], [])


def test_top1_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        top1_accuracy([1], [1, 2])


def test_gzsl_equal_components():
    split = ClassSplit(frozenset({0}), frozenset({1}))
    s, u, h = gzsl_metrics([0, 1, 0, 1], [0, 1, 0, 1], split)
    assert s == u == h == 1.0


def test_gzsl_harmonic_matches_published_row():
    # S=0.8002, U=0.8300 -> H computed from the harmonic-mean identity
    split = ClassSplit(frozenset(range(10_000)), frozenset(range(10_000, 20_000)))
    preds, labels = [], []
    for i in range(10_000):
        labels.append(i)
        preds.append(i if i < 8002 else (i + 1) % 10_000)
    for i in range(10_000, 20_000):
        labels.append(i)
        preds.append(i if i - 10_000 < 8300 else 10_000 + ((i + 1) % 10_000))
    s, u, h = gzsl_metrics(preds, labels, split)
    assert s == pytest.approx(0.8002)
    assert u == pytest.approx(0.8300)
    assert h == pytest.approx(0.8149, abs=1e-4)


def test_gzsl_unseen_zero_annihilates():
    split = ClassSplit(frozenset({0}), frozenset({1}))
    s, u, h = gzsl_metrics([0, 0], [0, 1], split)
    assert u == 0.0 and h == 0.0


def test_gzsl_requires_both_domains():
    split = ClassSplit(frozenset({0}), frozenset({1}))
    with pytest.raises(ValueError, match="both seen and unseen"):
        gzsl_metrics([0], [0], split)


def test_confusion_diagonal_for_perfect_predictions():
    mat = confusion_matrix([0, 1, 1, 2], [0, 1, 1, 2], [0, 1, 2])
    np.testing.assert_array_equal(mat, np.diag([1, 2, 1]))


def test_confusion_single_off_diagonal():
    mat = confusion_matrix(["b"], ["a"], ["a", "b"])
    np.testing.assert_array_equal(mat, [[0, 1], [0, 0]])


def test_confusion_row_sums_match_counts():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=200).tolist()
    preds = rng.integers(0, 4, size=200).tolist()
    mat = confusion_matrix(preds, labels, [0, 1, 2, 3])
    counts = [labels.count(c) for c in range(4)]
    np.testing.assert_array_equal(mat.sum(axis=1), counts)


def test_confusion_unknown_class():
    with pytest.raises(ValueError, match="outside class_order"):
        confusion_matrix([5], [0], [0, 1])


def test_report_top1_equals_confusion_trace():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 3, size=90).tolist()
    preds = rng.integers(0, 3, size=90).tolist()
    rep = build_report(preds, labels, [0, 1, 2])
    assert rep.top1 == pytest.approx(np.trace(rep.confusion) / rep.n_samples)


def test_report_harmonic_bounds():
    split = ClassSplit(frozenset({0, 1}), frozenset({2, 3}))
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, size=120).tolist()
    preds = rng.integers(0, 4, size=120).tolist()
    rep = build_report(preds, labels, [0, 1, 2, 3], split)
    assert rep.harmonic <= (rep.seen_acc + rep.unseen_acc) / 2 + 1e-12


def test_gzsl_order_invariance():
    split = ClassSplit(frozenset({0, 1}), frozenset({2}))
    preds = [0, 1, 2, 0, 2]
    labels = [0, 1, 2, 1, 2]
    base = gzsl_metrics(preds, labels, split)
    order = [3, 0, 4, 2, 1]
    shuffled = gzsl_metrics([preds[i] for i in order], [labels[i] for i in order], split)
    assert base == shuffled


def test_classwise_delta_identity():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, size=60).tolist()
    preds = rng.integers(0, 3, size=60).tolist()
    rep = build_report(preds, labels, [0, 1, 2])
    assert all(d == 0.0 for _, d in classwise_delta(rep, rep))


def test_classwise_delta_sorting():
    labels = [0] * 4 + [1] * 4
    before = build_report([0, 0, 1, 1, 1, 1, 1, 1], labels, [0, 1])
    after = build_report([0, 0, 0, 0, 1, 1, 1, 1], labels, [0, 1])
    deltas = classwise_delta(before, after)
    assert deltas[0] == (0, pytest.approx(0.5))
    assert deltas[1] == (1, pytest.approx(0.0))


def test_classwise_delta_matches_subtract_sort_oracle():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, size=300).tolist()
    rep_a = build_report(rng.integers(0, 5, size=300).tolist(), labels, range(5))
    rep_b = build_report(rng.integers(0, 5, size=300).tolist(), labels, range(5))
    got = classwise_delta(rep_a, rep_b)
    oracle = sorted(
        ((c, rep_b.per_class_acc[c] - rep_a.per_class_acc[c]) for c in rep_a.per_class_acc),
        key=lambda t: (-t[1], t[0]),
    )
    assert got == oracle


def test_classwise_delta_class_set_mismatch():
    labels_a = [0, 1]
    labels_b = [0, 2]
    rep_a = build_report([0, 1], labels_a, [0, 1, 2])
    rep_b = build_report([0, 2], labels_b, [0, 1, 2])
    with pytest.raises(ValueError, match="different class sets"):
        classwise_delta(rep_a, rep_b)


def test_report_rounding_half_even():
    rep = build_report([0, 0, 0, 1], [0, 0, 1, 1], [0, 1])
    doc = rep.to_json_dict()
    assert doc["top1"] == 0.75
    assert doc["per_class_acc"]["0"] == 1.0
    assert doc["per_class_acc"]["1"] == 0.5
