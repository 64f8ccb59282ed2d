import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffant.evaluate import (
    EvalWindow,
    MetricError,
    average_precision,
    class_accuracies,
    diverse_eval,
    edit_score,
    f1_at,
    frequency_split,
    map_multilabel,
    moc,
    segments,
    select_top1,
    seg_metrics,
)
from oracles import ap_bruteforce, edit_bruteforce, f1_bruteforce, moc_bruteforce


def test_window_frames():
    w = EvalWindow(0.3, 0.5)
    assert w.observed(100) == 30 and w.span(100) == (30, 80)
    # 0.7 * 10 must not floor to 7 - epsilon
    assert EvalWindow(0.7, 0.3).span(10) == (7, 10)
    with pytest.raises(ValueError):
        EvalWindow(0.6, 0.5)
    with pytest.raises(ValueError):
        EvalWindow(0.0, 0.5)
    with pytest.raises(ValueError):
        EvalWindow(0.5, 0.1).span(5)


def test_moc_identity_and_imbalance():
    gt = {"a": np.array([0] * 90 + [1] * 10)}
    assert moc(gt, gt) == 1.0
    pred = {"a": np.array([0] * 100)}
    # class 0 all right, class 1 all wrong -> 0.5 although 90% of frames are right
    assert moc(pred, gt) == 0.5
    assert class_accuracies(pred, gt) == {0: 1.0, 1: 0.0}


def test_moc_window_alignment():
    gt = {"v": np.array([5] * 3 + [1] * 4 + [2] * 3)}
    pred = {"v": np.array([1, 1, 1, 1, 2, 2, 9, 9])}  # future-aligned, longer than the window
    w = EvalWindow(0.3, 0.5)
    # window covers frames 3..7: GT [1,1,1,1,2], pred [1,1,1,1,2]
    assert moc(pred, gt, w) == 1.0
    assert moc(pred, gt, w) == moc_bruteforce(pred, gt, 0.3, 0.5)


def test_moc_errors():
    gt = {"a": np.zeros(10, dtype=int), "b": np.zeros(10, dtype=int)}
    with pytest.raises(MetricError):
        moc({"a": np.zeros(10)}, gt)
    with pytest.raises(MetricError):
        moc({"a": np.zeros(3), "b": np.zeros(10)}, gt)


def test_moc_pooled_over_videos_and_duplication():
    gt = {"a": np.array([0, 0, 1]), "b": np.array([1, 1, 1, 1])}
    pred = {"a": np.array([0, 1, 1]), "b": np.array([0, 0, 1, 1])}
    # class 0: 1/2, class 1: (1 + 2)/5
    assert moc(pred, gt) == pytest.approx((0.5 + 0.6) / 2, abs=1e-12)
    gt2 = dict(gt, c=gt["b"])
    pred2 = dict(pred, c=pred["b"])
    assert moc(pred2, gt2) == pytest.approx(moc_bruteforce(pred2, gt2), abs=1e-12)
    assert moc(pred2, gt2) != moc(pred, gt)


def test_average_precision_hand_cases():
    # positives {v1, v3}: both ranked above the negative
    assert average_precision([0.9, 0.1, 0.5], [1, 0, 1]) == 1.0
    # positives {v1, v2}: hits at ranks 1 and 3
    assert average_precision([0.9, 0.1, 0.5], [1, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)
    assert ap_bruteforce([0.9, 0.1, 0.5], [1, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)
    # all tied: precision is the base rate
    assert average_precision([0.2, 0.2, 0.2, 0.2], [1, 0, 0, 1]) == 0.5
    with pytest.raises(MetricError):
        average_precision([0.1, 0.2], [0, 0])


def test_map_splits():
    scores = np.array([[0.9, 0.2, 0.5], [0.1, 0.8, 0.5], [0.3, 0.7, 0.5]])
    gt = np.array([[1, 0, 0], [0, 1, 0], [0, 1, 0]])
    all_, freq, rare = map_multilabel(scores, gt, freq_classes={1})
    assert (all_, freq, rare) == (1.0, 1.0, 1.0)
    all_, freq, rare = map_multilabel(scores, gt, freq_classes={2})
    assert np.isnan(freq) and rare == 1.0
    with pytest.raises(MetricError):
        map_multilabel(scores, np.zeros_like(gt))
    with pytest.raises(MetricError):
        map_multilabel(np.full((3, 3), np.nan), gt)


def test_frequency_split_median():
    assert frequency_split([10, 1, 5, 7, 0]) == {0, 3}


def test_diverse_protocols():
    gt = {"a": np.array([0, 0, 1, 1]), "b": np.array([2, 2, 2, 2])}
    s = {"a": [np.array([0, 0, 0, 0]), np.array([0, 0, 1, 1])],
         "b": [np.array([2, 2, 2, 2]), np.array([2, 2, 2, 0])]}
    single = moc({v: x[0] for v, x in s.items()}, gt)
    assert diverse_eval(s, gt, protocol="averaged", m=1) == single
    assert diverse_eval(s, gt, protocol="top1", m=1) == single
    second = moc({v: x[1] for v, x in s.items()}, gt)
    assert diverse_eval(s, gt, protocol="averaged", m=2) == pytest.approx((single + second) / 2)
    assert diverse_eval(s, gt, protocol="top1", m=2) == 1.0
    with pytest.raises(MetricError):
        diverse_eval(s, gt, m=3)


def test_top1_tie_breaks_to_lowest_sample_id():
    gt = {"a": np.array([0, 1])}
    cands = [np.array([0, 0]), np.array([1, 1])]
    assert select_top1({"a": cands}, gt)["a"] is cands[0]


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_top1_monotone_over_nested_sets(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    gt = {i: rng.integers(0, 3, 12) for i in range(4)}
    samples = {i: [rng.integers(0, 3, 12) for _ in range(6)] for i in gt}
    for m in range(1, 6):
        small, big = select_top1(samples, gt, m=m), select_top1(samples, gt, m=m + 1)
        for v in gt:
            assert np.sum(big[v] == gt[v]) >= np.sum(small[v] == gt[v])


def test_segments_and_seg_metrics_examples():
    assert segments([1, 1, 2, 2, 2, 1]) == [(1, 0, 2), (2, 2, 5), (1, 5, 6)]
    gt = np.array([0] * 10 + [1] * 10)
    assert seg_metrics(gt, gt) == (1.0, 100.0, (100.0, 100.0, 100.0))
    assert seg_metrics([], gt) == (0.0, 0.0, (0.0, 0.0, 0.0))
    spurious = gt.copy()
    spurious[4] = 2
    acc, edit, f1 = seg_metrics(spurious, gt)
    assert acc == 0.95
    # segments: pred [0,2,0,1] vs gt [0,1]: one match per class, extra 0 and 2 are false positives
    # at IoU 0.1: tp=2 (0 [0,4) has IoU 0.4, 1 exact), fp=2, fn=0 -> F1 = 2*0.5*1/1.5
    assert f1[0] == pytest.approx(200 * 0.5 / 1.5)
    assert edit == 50.0
    assert f1[2] < 100.0


def test_edit_and_f1_match_oracles_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(1, 25)
        p, g = rng.integers(0, 3, n), rng.integers(0, 3, rng.integers(1, 25))
        assert edit_score(p, g) == pytest.approx(edit_bruteforce(p, g), abs=1e-9)
        for k in (0.1, 0.25, 0.5):
            assert f1_at(p, g, k) == pytest.approx(f1_bruteforce(p, g, k), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_metric_ranges(p, g):
    acc, edit, f1 = seg_metrics(p, g)
    assert 0 <= acc <= 1 and 0 <= edit <= 100 and all(0 <= x <= 100 for x in f1)
    n = min(len(p), len(g))
    gt = {"v": np.array(g[:n])}
    assert 0 <= moc({"v": np.array(p[:n])}, gt) <= 1
