"""Slow, independent reference implementations used as test oracles."""

import itertools
import math
from functools import lru_cache

import numpy as np


def moc_bruteforce(pred, gt, alpha=None, beta=None):
    correct, total = {}, {}
    for vid in gt:
        g = list(gt[vid])
        p = list(pred[vid])
        if alpha is not None:
            T = len(g)
            start = math.floor(alpha * T + 1e-9)
            stop = min(T, start + math.floor(beta * T + 1e-9))
            g = g[start:stop]
        for i, c in enumerate(g):
            total[c] = total.get(c, 0) + 1
            if p[i] == c:
                correct[c] = correct.get(c, 0) + 1
    return sum(correct.get(c, 0) / total[c] for c in total) / len(total)


def ap_bruteforce(scores, positives):
    """Sum over distinct thresholds of (recall gain) x precision at that threshold."""
    n_pos = sum(positives)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        chosen = [i for i, s in enumerate(scores) if s >= t]
        tp = sum(1 for i in chosen if positives[i])
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / len(chosen)
        prev_recall = recall
    return ap


def segment_labels(frames):
    return [k for k, _ in itertools.groupby(list(frames))]


def edit_bruteforce(pred, gt):
    a, b = tuple(segment_labels(pred)), tuple(segment_labels(gt))
    if not a or not b:
        return 0.0

    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(dist(i - 1, j) + 1, dist(i, j - 1) + 1, dist(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return 100.0 * (1 - dist(len(a), len(b)) / max(len(a), len(b)))


def _segments(frames):
    out, pos = [], 0
    for k, grp in itertools.groupby(list(frames)):
        n = len(list(grp))
        out.append((k, set(range(pos, pos + n))))
        pos += n
    return out


def f1_bruteforce(pred, gt, overlap):
    ps, gs = _segments(pred), _segments(gt)
    if not ps or not gs:
        return 0.0
    hit = [False] * len(gs)
    tp = fp = 0
    for label, frames in ps:
        ious = [len(frames & g) / len(frames | g) if gl == label else 0.0 for gl, g in gs]
        j = int(np.argmax(ious))
        if ious[j] >= overlap and not hit[j]:
            tp += 1
            hit[j] = True
        else:
            fp += 1
    fn = hit.count(False)
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 200.0 * prec * rec / (prec + rec)
