"""Open-set decisions from distances to per-class semantic centers.

A feature is accepted as known when its distance to the nearest center is
at most ``lam * sqrt(3 * t)``, t being the feature dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from redkit.errors import ConfigError, ShapeError

EUCLIDEAN = "euclidean"
MAHALANOBIS = "mahalanobis"   # diagonal per-class variances

DEFAULT_EPS_REG = 1e-6


@dataclass
class SemanticCenterSet:
    centers: np.ndarray              # (K, t)
    classes: tuple                   # class label of each row
    metric: str = EUCLIDEAN
    variances: np.ndarray | None = None   # (K, t), Mahalanobis mode only

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if self.centers.shape[0] < 1:
            raise ConfigError("need at least one center")
        if len(self.classes) != self.centers.shape[0]:
            raise ConfigError("one class label per center row is required")
        if self.metric not in (EUCLIDEAN, MAHALANOBIS):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.metric == MAHALANOBIS:
            if self.variances is None or self.variances.shape != self.centers.shape:
                raise ConfigError("Mahalanobis mode needs per-class variances shaped like centers")
            if not np.all(self.variances > 0):
                raise ConfigError("variances must be strictly positive")

    @property
    def dim(self):
        return self.centers.shape[1]

    @property
    def n_classes(self):
        return self.centers.shape[0]


@dataclass(frozen=True)
class Verdict:
    known: bool
    nearest_class: int
    min_distance: float


def compute_centers(features, labels, metric=EUCLIDEAN, eps_reg=DEFAULT_EPS_REG):
    """Per-class mean feature (and diagonal variance + eps_reg in Mahalanobis mode)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeError("features must be (N, t) with one label per row")
    classes = tuple(int(c) for c in np.unique(labels))
    if not classes:
        raise ConfigError("no samples to compute centers from")
    centers = np.empty((len(classes), features.shape[1]))
    variances = np.empty_like(centers) if metric == MAHALANOBIS else None
    for i, c in enumerate(classes):
        rows = features[labels == c]
        centers[i] = rows.mean(axis=0)
        if variances is not None:
            variances[i] = rows.var(axis=0) + eps_reg
    return SemanticCenterSet(centers, classes, metric, variances)


def distance(z, centers):
    """Distances from feature(s) ``z`` to every center: (K,) for one feature, (N, K) for many."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[1] != centers.dim:
        raise ShapeError(f"feature dimension {z2.shape[1]} != center dimension {centers.dim}")
    diff = z2[:, None, :] - centers.centers[None, :, :]
    if centers.metric == MAHALANOBIS:
        sq = np.sum(diff * diff / centers.variances[None], axis=2)
    else:
        sq = np.sum(diff * diff, axis=2)
    d = np.sqrt(sq)
    return d[0] if single else d


def threshold(lam, dim):
    """Acceptance radius lam * sqrt(3 * dim)."""
    return lam * np.sqrt(3.0 * dim)


def min_distance(features, centers):
    """Continuous anomaly score: distance to the nearest center, per feature row."""
    return distance(np.atleast_2d(features), centers).min(axis=1)


def decide(z, centers, lam):
    """Known (nearest class) if the nearest center is within the threshold, else rogue."""
    if not lam > 0:
        raise ConfigError("lambda must be > 0")
    d = distance(z, centers)
    k = int(np.argmin(d))   # first index on ties
    dmin = float(d[k])
    return Verdict(dmin <= threshold(lam, centers.dim), centers.classes[k], dmin)


def decide_batch(features, centers, lam):
    """Vectorized ``decide``: returns (accepted mask, nearest class, min distance)."""
    d = distance(np.atleast_2d(features), centers)
    k = np.argmin(d, axis=1)
    dmin = d[np.arange(len(d)), k]
    cls = np.asarray(centers.classes)[k]
    return dmin <= threshold(lam, centers.dim), cls, dmin


def default_lambda_grid():
    """0.20, 0.25, ..., 0.50."""
    return [round(0.2 + 0.05 * i, 2) for i in range(7)]


def sweep_lambda(features, is_known, centers, grid=None):
    """(lambda, TPR, FPR) per grid value; positives are known-class samples accepted as known."""
    grid = default_lambda_grid() if grid is None else list(grid)
    if not grid:
        raise ConfigError("lambda grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("lambda grid must be ascending")
    is_known = np.asarray(is_known, dtype=bool)
    scores = min_distance(features, centers)
    n_pos = max(int(is_known.sum()), 1)
    n_neg = max(int((~is_known).sum()), 1)
    out = []
    for lam in grid:
        acc = scores <= threshold(lam, centers.dim)
        out.append((lam, float(np.sum(acc & is_known) / n_pos),
                    float(np.sum(acc & ~is_known) / n_neg)))
    return out
