"""Per-layer anchor feature space and target-to-anchor alignment.

The anchor space is a PCA basis fitted on source (anchor) channel
magnitudes of one layer.  Target magnitudes are projected into it, then
scaled and rotated so that their class centroids line up with paired
anchor class centroids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (DegenerateClusteringError, DegenerateRotationError, DegenerateScaleError,
                     PairingError, ShapeError)
from .stats import ClusterStats, centroids, cluster_stats, inter_distance


@dataclass(frozen=True, eq=False)
class AnchorSpace:
    layer_id: tuple
    mean: np.ndarray
    basis: np.ndarray                 # (k, C), orthonormal rows
    explained_variance: np.ndarray    # (k,), non-increasing
    component_weights: np.ndarray     # (C,)
    anchor_centroids: dict
    anchor_margins: dict
    m_max: float
    anchor_stats: ClusterStats
    anchor_proj: np.ndarray
    anchor_mmcs: np.ndarray
    anchor_labels: np.ndarray
    channels: np.ndarray
    reduced: bool = False
    requested_k: int = 2

    @property
    def k(self):
        return self.basis.shape[0]

    @property
    def n_channels(self):
        return self.basis.shape[1]

    def project(self, mmcs):
        return project(self, mmcs)

    def restrict(self, channels) -> "AnchorSpace":
        """Refit on a subset of this space's channels (positions relative to it)."""
        channels = np.asarray(channels, dtype=int)
        k = min(self.requested_k, len(channels))
        return fit_anchor_space(self.anchor_mmcs[:, channels], self.anchor_labels, k=k,
                                layer_id=self.layer_id, channels=self.channels[channels],
                                requested_k=self.requested_k)


def _pca(x, k):
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2 / (len(x) - 1)
    # deterministic sign: largest-magnitude loading positive
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), idx])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    return mean, vt, var


def fit_anchor_space(anchor_mmcs, labels, k=2, layer_id=None, channels=None,
                     requested_k=None) -> AnchorSpace:
    """PCA of anchor magnitudes plus projected-anchor cluster statistics.

    If fewer than ``k`` components carry variance, ``k`` is reduced and the
    result is flagged ``reduced``.
    """
    x = np.asarray(anchor_mmcs, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2:
        raise ShapeError("anchor magnitudes must be (N, C)")
    if len(x) <= k:
        raise ShapeError(f"need more than k={k} samples, got {len(x)}")
    mean, vt, var = _pca(x, k)
    tol = max(var.max(initial=0.0) * 1e-10, 1e-15)
    rank = int((var > tol).sum())
    if rank == 0:
        raise DegenerateClusteringError("anchor magnitudes have no variance")
    reduced = rank < k
    k_eff = min(k, rank)
    basis = vt[:k_eff]
    ev = var[:k_eff]
    weights = (np.abs(basis) * ev[:, None]).sum(axis=0) / ev.sum()
    proj = (x - mean) @ basis.T
    stats = cluster_stats(proj, y)
    margins = stats.margins()
    if channels is None:
        channels = np.arange(x.shape[1])
    return AnchorSpace(
        layer_id=layer_id, mean=mean, basis=basis, explained_variance=ev,
        component_weights=weights, anchor_centroids=stats.per_class_centroids,
        anchor_margins=margins, m_max=float(max(margins.values())), anchor_stats=stats,
        anchor_proj=proj, anchor_mmcs=x, anchor_labels=y, channels=np.asarray(channels, dtype=int),
        reduced=reduced, requested_k=k if requested_k is None else requested_k,
    )


def project(space: AnchorSpace, mmcs):
    x = np.asarray(mmcs, dtype=np.float64)
    if x.shape[-1] != space.n_channels:
        raise ShapeError(f"expected {space.n_channels} channels, got {x.shape[-1]}")
    return (x - space.mean) @ space.basis.T


def scale_align(source_proj, source_labels, target_proj, target_labels):
    """Ratio of mean inter-class centroid distances, source over target."""
    src = inter_distance(centroids(source_proj, source_labels))
    tgt = inter_distance(centroids(target_proj, target_labels))
    if tgt == 0:
        raise DegenerateScaleError("target centroids coincide")
    return src / tgt


@dataclass(frozen=True)
class PairingSet:
    pairs: tuple        # ((source_class, target_class), ...) sorted by target class
    cost: float

    def source_of(self, target_class):
        for s, t in self.pairs:
            if t == target_class:
                return s
        raise KeyError(target_class)

    @property
    def source_classes(self):
        return [s for s, _ in self.pairs]


@dataclass(frozen=True)
class RotationAlignment:
    scale: float
    rotation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateScaleError("scale must be positive")

    def apply(self, proj):
        return self.scale * (np.asarray(proj) @ self.rotation)


def mean_cosine(source_centroids, target_centroids, pairing, scale=1.0, rotation=None):
    vals = []
    for cs, ct in pairing.pairs:
        a = np.asarray(source_centroids[cs])
        c = scale * np.asarray(target_centroids[ct])
        if rotation is not None:
            c = c @ rotation
        vals.append(a @ c / (np.linalg.norm(a) * np.linalg.norm(c)))
    return float(np.mean(vals))


def rotation_align(source_centroids, target_centroids, pairing: PairingSet, scale=1.0):
    """Proper rotation maximizing mean cosine similarity of paired centroids.

    With unit-normalized centroids the objective is linear in the rotation,
    so the optimum is the det(+1)-constrained orthogonal Procrustes solution.
    Rows are rotated as ``c @ R``.
    """
    if len(pairing.pairs) < 2:
        raise DegenerateRotationError("rotation alignment needs at least two pairs")
    a = np.stack([np.asarray(source_centroids[s], float) for s, _ in pairing.pairs])
    c = np.stack([scale * np.asarray(target_centroids[t], float) for _, t in pairing.pairs])
    na = np.linalg.norm(a, axis=1)
    nc = np.linalg.norm(c, axis=1)
    if np.any(na == 0) or np.any(nc == 0):
        raise DegenerateRotationError("zero centroid cannot be aligned by angle")
    a = a / na[:, None]
    c = c / nc[:, None]
    u, _, vt = np.linalg.svd(a.T @ c)
    v = vt.T
    d = np.ones(len(u))
    d[-1] = np.sign(np.linalg.det(v @ u.T)) or 1.0
    rot = v @ np.diag(d) @ u.T
    return RotationAlignment(float(scale), rot)


def shortlist(per_class_s: dict, n_target):
    """Top source classes by per-class silhouette; ties by ascending class."""
    ranked = sorted(per_class_s, key=lambda c: (-per_class_s[c], c))
    return ranked[:min(2 * n_target, len(ranked))]


def pair_anchors(source_stats: ClusterStats, target_centroids: dict) -> PairingSet:
    """One-to-one source/target class pairing minimizing total centroid distance."""
    n_src = len(source_stats.per_class_centroids)
    targets = sorted(target_centroids)
    if n_src < len(targets) or not targets:
        raise PairingError(f"{n_src} source classes cannot cover {len(targets)} target classes")
    cands = shortlist(source_stats.per_class_s, len(targets))
    src = np.stack([source_stats.per_class_centroids[c] for c in cands])
    tgt = np.stack([np.asarray(target_centroids[t], float) for t in targets])
    cost = np.linalg.norm(tgt[:, None, :] - src[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((cands[c], targets[r]) for r, c in zip(rows, cols))
    return PairingSet(pairs, math.fsum(cost[r, c] for r, c in zip(rows, cols)))


@dataclass(frozen=True)
class Alignment:
    pairing: PairingSet
    transform: RotationAlignment
    cosine_before: float
    cosine_after: float


def align_to_anchors(space: AnchorSpace, target_proj, target_labels, max_iter=8) -> Alignment:
    """Scale, then alternate anchor pairing, scale refit and rotation until the pairing is stable.

    The first scale uses every anchor class; once a pairing exists the scale
    is refitted against the paired anchor classes only, which are the ones
    the target is pulled towards.
    """
    tc = centroids(target_proj, target_labels)
    s = scale_align(space.anchor_proj, space.anchor_labels, target_proj, target_labels)
    t_inter = inter_distance(tc)
    rot = np.eye(space.k)
    pairing = None
    first_cos = None
    for _ in range(max_iter):
        moved = {c: s * (v @ rot) for c, v in tc.items()}
        new = pair_anchors(space.anchor_stats, moved)
        if pairing is not None and new.pairs == pairing.pairs:
            break
        pairing = new
        if first_cos is None:
            first_cos = mean_cosine(space.anchor_centroids, tc, pairing, s)
        if len(pairing.pairs) >= 2:
            s = inter_distance({c: space.anchor_centroids[c] for c in pairing.source_classes}) / t_inter
            rot = rotation_align(space.anchor_centroids, tc, pairing, s).rotation
    after = mean_cosine(space.anchor_centroids, tc, pairing, s, rot)
    return Alignment(pairing, RotationAlignment(s, rot), first_cos, after)
