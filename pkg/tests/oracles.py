"""Independent naive oracles used by the tests.

Everything here recomputes results from first principles with plain loops
and the public single-sample model API, never sharing code with the
vectorized implementation paths it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from dpcre.losses import Origin
from dpcre.mathcore import stable_key
from dpcre.model import encode, project


def _anchor_key(item) -> int:
    feats = np.ascontiguousarray(item.features, dtype=np.float64)
    return stable_key(int(item.label), feats.tobytes())


def naive_contrastive(m, batch, tau, rng, decoupled, include_self=False):
    """Direct per-anchor transcription of the contrastive losses."""
    items = batch.items
    n = len(items)
    H = [project(m, encode(m, it.features)) for it in items]
    keys = [_anchor_key(it) for it in items]

    def eligible(i):
        return (not decoupled) or items[i].origin is Origin.NEW

    per_anchor = []
    for i in range(n):
        if not eligible(i):
            continue
        mates = [
            j
            for j in range(n)
            if j != i and eligible(j) and items[j].label == items[i].label
        ]
        if not mates:
            continue
        mates_sorted = sorted(mates, key=lambda j: (keys[j], j))
        pos = mates_sorted[rng.keyed_index(len(mates), keys[i], "positive")]
        num = math.exp(float(np.dot(H[i], H[pos])) / tau)
        den = 0.0
        for u in range(n):
            if u == i and not include_self:
                continue
            den += math.exp(float(np.dot(H[i], H[u])) / tau)
        per_anchor.append(-math.log(num / den))
    return float(np.mean(per_anchor)) if per_anchor else 0.0


def naive_ca(m, prev, mem_batch):
    """Ordered-pair transcription of the change-amount loss."""
    items = mem_batch.items
    deltas = [
        project(m, encode(m, it.features)) - project(prev, encode(prev, it.features))
        for it in items
    ]
    n = len(items)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if items[i].label == items[j].label:
                total += float(np.linalg.norm(deltas[i] - deltas[j]))
    return total / n


def grid_gamma(learn, keep, points=100001):
    """Grid-search minimizer of |g*learn + (1-g)*keep|^2 over [0, 1]."""
    grid = np.linspace(0.0, 1.0, points)
    ll = float(learn @ learn)
    lk = float(learn @ keep)
    kk = float(keep @ keep)
    norms = grid**2 * ll + 2 * grid * (1 - grid) * lk + (1 - grid) ** 2 * kk
    return float(grid[int(norms.argmin())])


def _partition_objective(points, blocks):
    total = 0.0
    for block in blocks:
        pts = points[list(block)]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def exhaustive_kmeans_1d(points, k):
    """Optimal k-means objective for 1-D data via contiguous splits.

    For squared Euclidean cost in one dimension the optimal clusters are
    contiguous in sorted order, so enumerating split positions is an
    exhaustive search over candidate optima.
    """
    xs = np.sort(np.asarray(points, dtype=np.float64).ravel())
    n = len(xs)
    k = min(k, n)
    best = math.inf
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = [0, *cuts, n]
        blocks = [range(bounds[i], bounds[i + 1]) for i in range(k)]
        best = min(best, _partition_objective(xs[:, None], blocks))
    return best


def exhaustive_kmeans_partitions(points, k):
    """Optimal k-means objective by enumerating all set partitions into at
    most k blocks (only feasible for small n)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n > 14:
        raise ValueError("partition enumeration is only for small instances")
    best = [math.inf]

    def extend(i, blocks):
        if i == n:
            best[0] = min(best[0], _partition_objective(points, blocks))
            return
        for b in blocks:
            b.append(i)
            extend(i + 1, blocks)
            b.pop()
        if len(blocks) < k:
            blocks.append([i])
            extend(i + 1, blocks)
            blocks.pop()

    extend(0, [])
    return best[0]
