"""Layer activation statistics: channel magnitudes, silhouettes, centroids."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateClusteringError, EmptyInputError, ShapeError


def mmc(features):
    """Mean magnitude of channels: per sample, mean |activation| over spatial dims.

    Returns an (N, C) array.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] == 0:
        raise EmptyInputError("mmc needs a non-empty batch")
    return np.abs(x.reshape(x.shape[0], x.shape[1], -1)).mean(axis=2)


def _check_labels(points, labels):
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError("points must be (N, D) with one label per row")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateClusteringError("at least two classes are required")
    return x, y, classes


def silhouette(points, labels):
    """Euclidean silhouette score.

    Returns ``(mean_score, {class: mean score of its samples})``.  Samples in
    singleton classes score 0; a sample with a == b == 0 also scores 0.
    """
    x, y, classes = _check_labels(points, labels)
    d = cdist(x, x)
    onehot = (y[:, None] == classes[None, :]).astype(float)    # (N, K)
    counts = onehot.sum(axis=0)
    sums = d @ onehot                                           # (N, K) distance sums per class
    own = np.searchsorted(classes, y)
    n = len(y)
    own_count = counts[own]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = sums[np.arange(n), own] / (own_count - 1)
        means = sums / counts[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.zeros(n)
    ok = (own_count > 1) & (denom > 0)
    s[ok] = (b[ok] - a[ok]) / denom[ok]
    per_class = {c.item() if hasattr(c, "item") else c: float(s[y == c].mean()) for c in classes}
    return float(s.mean()), per_class


@dataclass(frozen=True)
class ClusterStats:
    per_class_centroids: dict
    inter_d: float
    intra_d: dict
    nearest_inter_d: dict
    s_score: float
    per_class_s: dict

    @property
    def classes(self):
        return sorted(self.per_class_centroids)

    def margins(self):
        """Per-class separation margin: nearest-centroid distance minus spread."""
        return {c: self.nearest_inter_d[c] - self.intra_d[c] for c in self.classes}


def centroids(points, labels):
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    return {c.item(): x[y == c].mean(axis=0) for c in np.unique(y)}


def inter_distance(cents: dict):
    """Mean Euclidean distance over unordered centroid pairs."""
    keys = sorted(cents)
    if len(keys) < 2:
        raise DegenerateClusteringError("inter-class distance needs two classes")
    c = np.stack([cents[k] for k in keys])
    d = cdist(c, c)
    iu = np.triu_indices(len(keys), 1)
    return float(d[iu].mean())


def cluster_stats(points, labels) -> ClusterStats:
    x, y, classes = _check_labels(points, labels)
    cents = centroids(x, y)
    keys = sorted(cents)
    c = np.stack([cents[k] for k in keys])
    d = cdist(c, c)
    np.fill_diagonal(d, np.inf)
    nearest = {k: float(d[i].min()) for i, k in enumerate(keys)}
    intra = {k: float(np.linalg.norm(x[y == k] - cents[k], axis=1).mean()) for k in keys}
    s, per = silhouette(x, y)
    return ClusterStats(cents, inter_distance(cents), intra, nearest, s, per)


def mmc_shift(source_mmcs, target_mmcs):
    """||mean(target) - mean(source)|| / ||mean(source)||."""
    s = np.asarray(source_mmcs, dtype=np.float64)
    t = np.asarray(target_mmcs, dtype=np.float64)
    if s.ndim != 2 or t.ndim != 2 or s.shape[1] != t.shape[1]:
        raise ShapeError("mmc_shift needs (N, C) arrays with equal channel counts")
    if len(s) == 0 or len(t) == 0:
        raise EmptyInputError("mmc_shift needs non-empty batches")
    ms = s.mean(axis=0)
    norm = np.linalg.norm(ms)
    if norm == 0:
        raise DegenerateClusteringError("source mean MMC is zero")
    return float(np.linalg.norm(t.mean(axis=0) - ms) / norm)
