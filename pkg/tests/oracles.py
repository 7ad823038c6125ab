"""Brute-force reference implementations shared by unit and acceptance tests."""
import itertools
import math

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist


def brute_isotonic(y, w):
    """Minimum weighted SSE over all partitions into contiguous blocks with non-decreasing means."""
    n = len(y)
    best, best_fit = math.inf, None
    for cuts in itertools.product([0, 1], repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        fit = np.empty(n)
        for a, b in zip(bounds[:-1], bounds[1:]):
            fit[a:b] = np.average(y[a:b], weights=w[a:b])
        if np.all(np.diff(fit) >= -1e-12):
            sse = float(np.sum(w * (y - fit) ** 2))
            if sse < best - 1e-12:
                best, best_fit = sse, fit
    return best_fit


def brute_boundary(m):
    pad = np.pad(m, 1)
    out = np.zeros_like(m)
    for idx in zip(*np.nonzero(m)):
        i, j, k = (x + 1 for x in idx)
        nbrs = [pad[i - 1, j, k], pad[i + 1, j, k], pad[i, j - 1, k], pad[i, j + 1, k], pad[i, j, k - 1], pad[i, j, k + 1]]
        out[idx] = not all(nbrs)
    return out


def brute_asd(a, b, spacing):
    pa = np.argwhere(brute_boundary(a)) * np.asarray(spacing)
    pb = np.argwhere(brute_boundary(b)) * np.asarray(spacing)
    d = cdist(pa, pb)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def enumerated_wilcoxon(d):
    """W and two-sided p by listing every sign assignment over the mid-ranks."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    sums = np.array([np.dot(s, ranks) for s in itertools.product([0, 1], repeat=d.size)])
    lo = np.mean(sums <= w + 1e-9)
    hi = np.mean(sums >= w - 1e-9)
    return w, min(1.0, 2 * min(lo, hi))


def box(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m
