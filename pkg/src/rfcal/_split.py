"""Compiled split search used by the tree grower."""

import numpy as np
from numba import njit

GINI = 0
ENTROPY = 1


@njit(cache=True, nogil=True)
def _impurity(counts, total, criterion):
    if total <= 0.0:
        return 0.0
    out = 0.0
    if criterion == GINI:
        acc = 0.0
        for j in range(counts.shape[0]):
            f = counts[j] / total
            acc += f * f
        out = 1.0 - acc
    else:
        for j in range(counts.shape[0]):
            if counts[j] > 0.0:
                f = counts[j] / total
                out -= f * np.log2(f)
    return out


@njit(cache=True, nogil=True)
def best_split(X, y, rows, weights, counts, n_classes, order, max_features,
               criterion, min_samples_leaf, min_gain):
    """Scan candidate features in ``order`` and return the best split.

    Constant features are skipped and do not count towards ``max_features``.
    Returns ``(feature, threshold, gain)``; feature is -1 when no candidate
    beats ``min_gain``.  Ties go to the lowest feature index, then the lowest
    threshold.
    """
    n = rows.shape[0]
    parent = np.zeros(n_classes)
    n_parent = 0
    for r in range(n):
        i = rows[r]
        parent[y[i]] += weights[i]
        n_parent += counts[i]
    w_parent = parent.sum()
    imp_parent = _impurity(parent, w_parent, criterion)

    best_f = -1
    best_t = 0.0
    best_g = min_gain
    left = np.zeros(n_classes)
    right = np.zeros(n_classes)
    vals = np.empty(n)
    evaluated = 0

    for oi in range(order.shape[0]):
        if evaluated >= max_features:
            break
        f = order[oi]
        lo = np.inf
        hi = -np.inf
        for r in range(n):
            v = X[rows[r], f]
            vals[r] = v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        if not lo < hi:
            continue
        evaluated += 1

        srt = np.argsort(vals, kind="mergesort")
        left[:] = 0.0
        n_left = 0
        for s in range(n - 1):
            i = rows[srt[s]]
            left[y[i]] += weights[i]
            n_left += counts[i]
            v_here = vals[srt[s]]
            v_next = vals[srt[s + 1]]
            if not v_here < v_next:
                continue
            n_right = n_parent - n_left
            if n_left < min_samples_leaf or n_right < min_samples_leaf:
                continue
            w_left = left.sum()
            for j in range(n_classes):
                right[j] = parent[j] - left[j]
            w_right = w_parent - w_left
            if w_left <= 0.0 or w_right <= 0.0:
                continue
            gain = imp_parent - (w_left / w_parent) * _impurity(left, w_left, criterion) \
                - (w_right / w_parent) * _impurity(right, w_right, criterion)
            thr = 0.5 * (v_here + v_next)
            if thr >= v_next:
                thr = v_here
            better = gain > best_g
            if not better and best_f >= 0 and gain == best_g:
                better = f < best_f or (f == best_f and thr < best_t)
            if better:
                best_f = f
                best_t = thr
                best_g = gain
    return best_f, best_t, best_g
