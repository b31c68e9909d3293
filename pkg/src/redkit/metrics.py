"""Detection and feature-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from redkit.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ConfigError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, accepted, is_known):
        accepted = np.asarray(accepted, dtype=bool)
        is_known = np.asarray(is_known, dtype=bool)
        return cls(int(np.sum(accepted & is_known)), int(np.sum(~accepted & is_known)),
                   int(np.sum(accepted & ~is_known)), int(np.sum(~accepted & ~is_known)))


def tpr_fpr(c):
    if c.tp + c.fn == 0 or c.fp + c.tn == 0:
        raise ConfigError("TPR/FPR need at least one positive and one negative")
    return c.tp / (c.tp + c.fn), c.fp / (c.fp + c.tn)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray   # first entry is -inf (nothing accepted)
    auc: float

    def rows(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def roc_auc(scores, is_known):
    """ROC of the rule "known iff score <= threshold", swept over every distinct score.

    Equal scores move together, so a tie contributes a diagonal step and half
    credit to the trapezoidal area.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_known = np.asarray(is_known, dtype=bool)
    if scores.shape != is_known.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be matching 1-D arrays")
    n_pos = int(is_known.sum())
    n_neg = is_known.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("ROC needs both known and rogue samples")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    k = is_known[order]
    tp = np.cumsum(k)
    fp = np.cumsum(~k)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]   # end of each tie group
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thr = np.r_[-np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thr, auc)


def silhouette(features, labels):
    """Mean silhouette over points; singleton clusters and a == b == 0 contribute 0."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError("features must be (N, t) with one label per row")
    classes, inv = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ConfigError("silhouette needs at least two clusters")
    d = cdist(x, x)
    counts = np.bincount(inv, minlength=classes.size)
    # per point: summed distance to each cluster
    sums = np.zeros((x.shape[0], classes.size))
    for j in range(classes.size):
        sums[:, j] = d[:, inv == j].sum(axis=1)
    rows = np.arange(x.shape[0])
    own = counts[inv]
    a = np.where(own > 1, sums[rows, inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[rows, inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


@dataclass
class Projection:
    coords: np.ndarray       # (n, 2)
    components: np.ndarray   # (2, t)
    mean: np.ndarray         # (t,)

    def reconstruct(self):
        return self.coords @ self.components + self.mean


def project2d(features, return_basis=False):
    """Projection onto the top two principal components.

    Each component's largest-magnitude loading is made positive so the
    output is deterministic.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ShapeError("project2d needs at least 2 samples of dimension >= 2")
    mean = x.mean(axis=0)
    xc = x - mean
    if not np.any(xc):
        raise ConfigError("features have zero variance")
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2].copy()
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = Projection(xc @ comps.T, comps, mean)
    return proj if return_basis else proj.coords
