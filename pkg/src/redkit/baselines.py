"""Classical novelty scorers: Local Outlier Factor and Isolation Forest.

Both are fitted on reference (known-class) feature vectors and score
queries so that larger means more anomalous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from redkit.errors import ConfigError

LRD_FLOOR = 1e-12
EULER_GAMMA = 0.5772156649015329


@dataclass
class LofModel:
    points: np.ndarray
    k: int
    k_distance: np.ndarray   # per reference point
    lrd: np.ndarray          # local reachability density per reference point


def _kth_smallest(d, k):
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def lof_fit(points, k=20):
    """Precompute k-distances and reachability densities of the reference set.

    Neighborhoods follow the tie-inclusive definition: every point within the
    k-distance is a neighbor, so there may be more than k.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"LOF needs 1 <= k < N (k={k}, N={n})")
    d = cdist(x, x)
    np.fill_diagonal(d, np.inf)   # a point is not its own neighbor
    kdist = _kth_smallest(d, k)
    lrd = _lrd(d, kdist, kdist)
    return LofModel(x, k, kdist, lrd)


def _lrd(d, own_kdist, ref_kdist):
    """Reachability density of each row of ``d`` (distances to the reference set)."""
    nbr = d <= own_kdist[:, None]
    reach = np.maximum(ref_kdist[None, :], d)
    mean_reach = np.where(nbr, reach, 0.0).sum(axis=1) / nbr.sum(axis=1)
    return 1.0 / np.maximum(mean_reach, LRD_FLOOR)


def lof_score(model, queries):
    """LOF of each query with respect to the fitted reference set."""
    if model is None or model.lrd is None:
        raise ConfigError("LOF model is not fitted")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d = cdist(q, model.points)
    kdist = _kth_smallest(d, model.k)
    lrd_q = _lrd(d, kdist, model.k_distance)
    nbr = d <= kdist[:, None]
    mean_lrd = np.where(nbr, model.lrd[None, :], 0.0).sum(axis=1) / nbr.sum(axis=1)
    return mean_lrd / lrd_q


def average_path_length(n):
    """Expected unsuccessful-search path length in a BST of n nodes, c(n)."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    out = np.where(n == 2, 1.0, out)
    big = n > 2
    nb = np.where(big, n, 3.0)
    harmonic = np.log(nb - 1) + EULER_GAMMA
    return np.where(big, 2 * harmonic - 2 * (nb - 1) / nb, out)


@dataclass
class _Node:
    depth: int
    size: int = 0
    feature: int = -1
    low: float = 0.0       # node minimum of the split feature
    offset: float = 0.0    # split at low + offset; compared as (x - low) < offset
    left: "_Node" = None
    right: "_Node" = None


def _grow(x, depth, height_limit, rng):
    n = x.shape[0]
    if depth >= height_limit or n <= 1:
        return _Node(depth, size=n)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    free = np.flatnonzero(hi > lo)
    if free.size == 0:
        return _Node(depth, size=n)
    q = int(free[rng.integers(free.size)])
    offset = float(rng.uniform()) * (hi[q] - lo[q])
    go_left = (x[:, q] - lo[q]) < offset
    if go_left.all() or not go_left.any():
        return _Node(depth, size=n)
    return _Node(depth, size=n, feature=q, low=float(lo[q]), offset=offset,
                 left=_grow(x[go_left], depth + 1, height_limit, rng),
                 right=_grow(x[~go_left], depth + 1, height_limit, rng))


def _path_lengths(node, x, idx, out):
    if node.feature < 0:
        out[idx] = node.depth + average_path_length(node.size)
        return
    go_left = (x[idx, node.feature] - node.low) < node.offset
    _path_lengths(node.left, x, idx[go_left], out)
    _path_lengths(node.right, x, idx[~go_left], out)


@dataclass
class IsoForest:
    trees: list
    psi: int
    n_trees: int
    seed: int


def iforest_fit(points, n_trees=100, psi=256, seed=0):
    """Isolation forest; tree i draws from a generator seeded by (seed, i).

    Reference points are put in lexicographic order before subsampling so
    the forest does not depend on their input order.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("IsolationForest needs at least 2 reference points")
    x = x[np.lexsort(x.T[::-1])]
    n = x.shape[0]
    psi = min(psi, n)
    height_limit = int(np.ceil(np.log2(psi)))
    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng([seed, i])
        sub = np.sort(rng.choice(n, size=psi, replace=False)) if psi < n else np.arange(n)
        trees.append(_grow(x[sub], 0, height_limit, rng))
    return IsoForest(trees, psi, n_trees, seed)


def iforest_score(model, queries):
    """Anomaly score 2^(-E[h(x)] / c(psi)) in (0, 1); higher is more anomalous."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    total = np.zeros(q.shape[0])
    buf = np.empty(q.shape[0])
    idx = np.arange(q.shape[0])
    for tree in model.trees:
        _path_lengths(tree, q, idx, buf)
        total += buf
    mean_h = total / len(model.trees)
    return 2.0 ** (-mean_h / average_path_length(model.psi))
