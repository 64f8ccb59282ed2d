"""Anticipation and segmentation metrics.

Per-class accuracies are pooled over the dataset (correct frames of a class
summed over videos, divided by its ground-truth frames) before averaging
over the classes that occur in the evaluated windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def _floor(x: float) -> int:
    # guards against 0.7 * 10 = 7.000000000000001 style round-off
    return int(math.floor(x + 1e-9))


@dataclass(frozen=True)
class EvalWindow:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.alpha + self.beta > 1 + 1e-9:
            raise ValueError(f"alpha + beta must not exceed 1 ({self.alpha} + {self.beta})")

    def observed(self, T: int) -> int:
        return _floor(self.alpha * T)

    def span(self, T: int) -> tuple[int, int]:
        """Frame range [start, stop) of the evaluated future within a video of T frames."""
        start = self.observed(T)
        stop = min(T, start + _floor(self.beta * T))
        if stop <= start:
            raise ValueError(f"empty evaluation window for T={T}")
        return start, stop


def _window_pairs(pred, gt, window):
    """Yield (pred, gt) arrays restricted to the evaluation window.

    With a window, ``pred`` is aligned to the end of the observation and
    ``gt`` holds the full video labels.  Without one both are used as given.
    """
    missing = set(gt) - set(pred)
    if missing:
        raise MetricError(f"missing predictions for {sorted(missing)[:5]}")
    for vid in sorted(gt):
        g = np.asarray(gt[vid])
        p = np.asarray(pred[vid])
        if window is not None:
            start, stop = window.span(len(g))
            g = g[start:stop]
            p = p[: stop - start]
        if len(p) < len(g):
            raise MetricError(f"prediction for {vid} covers {len(p)} of {len(g)} frames")
        yield vid, p[: len(g)], g


def class_accuracies(pred, gt, window=None) -> dict[int, float]:
    correct: dict[int, int] = {}
    total: dict[int, int] = {}
    for _, p, g in _window_pairs(pred, gt, window):
        for c in np.unique(g):
            sel = g == c
            total[int(c)] = total.get(int(c), 0) + int(sel.sum())
            correct[int(c)] = correct.get(int(c), 0) + int(np.sum(p[sel] == c))
    return {c: correct[c] / total[c] for c in sorted(total)}


def moc(pred, gt, window=None) -> float:
    """Mean over classes of frame accuracy; classes absent from the GT windows are ignored."""
    acc = class_accuracies(pred, gt, window)
    if not acc:
        raise MetricError("no ground-truth frames in the evaluation windows")
    return float(np.mean(list(acc.values())))


def correct_frames(pred, gt) -> int:
    return int(np.sum(np.asarray(pred)[: len(gt)] == np.asarray(gt)))


def diverse_eval(samples, gt, window=None, protocol="averaged", m=None) -> float:
    """MoC under the averaged or top-1-of-m protocol.

    ``samples`` maps video id to a list of predictions ordered by sample id;
    only the first ``m`` are used.  Top-1 keeps, per video, the sample with the
    most correctly predicted frames (lowest sample id on ties).
    """
    counts = {len(v) for v in samples.values()}
    m = min(counts) if m is None else m
    if m < 1 or m > min(counts):
        raise MetricError(f"need m in [1, {min(counts)}], got {m}")
    if protocol == "averaged":
        return float(np.mean([moc({v: s[j] for v, s in samples.items()}, gt, window)
                              for j in range(m)]))
    if protocol == "top1":
        return moc(select_top1(samples, gt, window, m), gt, window)
    raise ValueError(f"unknown protocol {protocol!r}")


def select_top1(samples, gt, window=None, m=None):
    chosen = {}
    for vid, g in gt.items():
        cands = samples[vid][:m]
        g = np.asarray(g)
        if window is not None:
            start, stop = window.span(len(g))
            g = g[start:stop]
        scores = [correct_frames(c, g) for c in cands]
        chosen[vid] = cands[int(np.argmax(scores))]
    return chosen


def average_precision(scores, positives) -> float:
    """Area under the precision-recall step function over distinct score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        raise MetricError("average precision undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positives[order]
    tp = np.cumsum(y)
    # keep the last index of every run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall = tp_at / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def map_multilabel(scores, gt, freq_classes=None):
    """Mean AP over classes with at least one positive video.

    ``scores`` and ``gt`` are (N, C) arrays (``gt`` binary).  Returns
    (all, freq, rare); a split with no evaluable class yields nan.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if scores.shape != gt.shape:
        raise MetricError(f"scores {scores.shape} vs labels {gt.shape}")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    aps = {c: average_precision(scores[:, c], gt[:, c])
           for c in range(gt.shape[1]) if gt[:, c].any()}
    if not aps:
        raise MetricError("no class has a positive video")
    freq = set(freq_classes or ())

    def mean(keys):
        vals = [aps[c] for c in keys if c in aps]
        return float(np.mean(vals)) if vals else float("nan")

    return mean(aps), mean(c for c in aps if c in freq), mean(c for c in aps if c not in freq)


def frequency_split(train_counts) -> set[int]:
    """Classes whose training occurrence count is above the median are 'freq'."""
    counts = np.asarray(train_counts)
    med = np.median(counts)
    return {int(c) for c in np.flatnonzero(counts > med)}


def segments(labels):
    """Run-length encode to (label, start, stop) triples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.r_[0, cuts]
    stops = np.r_[cuts, labels.size]
    return [(labels[a].item(), int(a), int(b)) for a, b in zip(starts, stops)]


def _levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    p = [s[0] for s in segments(pred)]
    g = [s[0] for s in segments(gt)]
    if not p or not g:
        return 0.0
    return (1 - _levenshtein(p, g) / max(len(p), len(g))) * 100


def f1_at(pred, gt, overlap: float) -> float:
    ps, gs = segments(pred), segments(gt)
    if not ps or not gs:
        return 0.0
    used = [False] * len(gs)
    tp = fp = 0
    for label, a, b in ps:
        best, best_j = 0.0, -1
        for j, (gl, ga, gb) in enumerate(gs):
            if gl != label:
                continue
            inter = max(0, min(b, gb) - max(a, ga))
            union = max(b, gb) - min(a, ga)
            iou = inter / union
            if iou > best:
                best, best_j = iou, j
        if best >= overlap and not used[best_j]:
            tp += 1
            used[best_j] = True
        else:
            fp += 1
    fn = len(gs) - sum(used)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall) * 100


def seg_metrics(pred, gt, overlaps=(0.1, 0.25, 0.5)):
    """Frame accuracy in [0, 1], edit score and F1@overlaps in [0, 100]."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.size == 0 or gt.size == 0:
        return 0.0, 0.0, tuple(0.0 for _ in overlaps)
    n = min(len(pred), len(gt))
    acc = float(np.sum(pred[:n] == gt[:n]) / len(gt))
    return acc, edit_score(pred, gt), tuple(f1_at(pred, gt, k) for k in overlaps)
