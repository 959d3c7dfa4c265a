"""Splice, repair and channel removal for a single frozen L-unit.

A trainable connector (1x1 pre-header, bilinear resizer, residual
encoder/decoder pair) maps arbitrary target features onto the input shape of
a frozen unit.  It is trained so that the unit's projected channel
magnitudes line up with the paired anchor classes, then unneeded output
channels are dropped by a component-weight ranking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import nn
from .anchor import AnchorSpace, PairingSet, RotationAlignment, align_to_anchors, rotation_align, scale_align
from .errors import ConfigError, RepairDivergenceError
from .stats import centroids, mmc, silhouette
from .zoo import LUnit, ResourceCost, TensorShape, as_shape, unit_backward, unit_forward_cached

REMOVAL_FRACTIONS = (1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 100
    optimizer: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.95
    lr_step: int = 20
    lr_decay: float = 0.5
    early_stop_patience: int = 20
    clip_norm: Optional[float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        for name in ("lr", "momentum", "lr_step", "lr_decay", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or null")

    def make_optimizer(self):
        return nn.SGD(self.lr, self.momentum, self.lr_step, self.lr_decay, self.clip_norm)


# --------------------------------------------------------------------------
# default reshaping

def default_reshape(batch, expected_shape):
    """Bilinear spatial resize then a fixed 1x1 channel map.

    The channel map is the identity when channel counts agree and a
    uniform average of the input channels otherwise.
    """
    x = np.asarray(batch, dtype=np.float64)
    expected = as_shape(expected_shape)
    x, _ = nn.resize_forward(x, expected.hw)
    if x.shape[1] == expected.channels:
        return x
    avg = np.full((expected.channels, x.shape[1]), 1.0 / x.shape[1])
    return np.einsum("nchw,oc->nohw", x, avg)


def default_reshape_cost(in_shape, expected_shape):
    a, e = as_shape(in_shape), as_shape(expected_shape)
    flops = 0
    if a.hw != e.hw:
        flops += nn.resize_flops(a.channels, e.hw)
    if a.channels != e.channels:
        flops += nn.conv_flops(a.channels, e.channels, 1, e.hw, bias=False)
    return ResourceCost(flops, 0)


# --------------------------------------------------------------------------
# connector

class Connector:
    """Trainable splice between heterogeneous layers.

    ``out = h + dec(relu(enc(h)))`` with ``h = resize(pre(x))``; every conv
    is 1x1.  The skip around the encoder/decoder keeps narrow inputs from
    being squeezed through a one-channel bottleneck.
    """

    PARAM_NAMES = ("pre_w", "pre_b", "enc_w", "enc_b", "dec_w", "dec_b")

    def __init__(self, in_shape, out_shape, r=4, params=None):
        self.in_shape = as_shape(in_shape)
        self.out_shape = as_shape(out_shape)
        self.r = int(r)
        self.bottleneck = max(1, self.out_shape.channels // self.r)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()}

    @classmethod
    def build(cls, target_shape, expected_shape, r=4, seed=0, in_stats=None, out_stats=None):
        """Seeded scaled-normal init.

        With ``in_stats``/``out_stats`` (per-channel ``(mean, std)`` of the
        target batch and of the frozen unit's usual input) the pre-header is
        adapted so that its initial output has the expected per-channel
        mean and spread.
        """
        c = cls(target_shape, expected_shape, r)
        rng = np.random.default_rng(seed)
        ci, ce, cb = c.in_shape.channels, c.out_shape.channels, c.bottleneck
        pre_w = rng.normal(0.0, np.sqrt(1.0 / ci), (ce, ci, 1, 1))
        pre_b = np.zeros(ce)
        if in_stats is not None and out_stats is not None:
            mu_t, sd_t = (np.asarray(a, float) for a in in_stats)
            mu_e, sd_e = (np.asarray(a, float) for a in out_stats)
            w = pre_w[:, :, 0, 0] / np.maximum(sd_t, 1e-8)
            # rows rescaled so each output channel has roughly unit-input gain times sd_e
            w *= (sd_e / np.maximum(np.linalg.norm(pre_w[:, :, 0, 0], axis=1), 1e-8))[:, None]
            pre_w = w[:, :, None, None]
            pre_b = mu_e - w @ mu_t
        c.params = {
            "pre_w": pre_w,
            "pre_b": pre_b,
            "enc_w": rng.normal(0.0, np.sqrt(2.0 / ce), (cb, ce, 1, 1)),
            "enc_b": np.zeros(cb),
            "dec_w": rng.normal(0.0, 0.1 * np.sqrt(1.0 / cb), (ce, cb, 1, 1)),
            "dec_b": np.zeros(ce),
        }
        return c

    def copy(self):
        return Connector(self.in_shape, self.out_shape, self.r,
                         {k: v.copy() for k, v in self.params.items()})

    @property
    def encoder_channels(self):
        return self.bottleneck

    @property
    def param_count(self):
        return int(sum(v.size for v in self.params.values()))

    def cost(self) -> ResourceCost:
        ci, ce, cb = self.in_shape.channels, self.out_shape.channels, self.bottleneck
        hw_in, hw_out = self.in_shape.hw, self.out_shape.hw
        flops = nn.conv_flops(ci, ce, 1, hw_in)
        if hw_in != hw_out:
            flops += nn.resize_flops(ce, hw_out)
        flops += nn.conv_flops(ce, cb, 1, hw_out) + nn.conv_flops(cb, ce, 1, hw_out)
        flops += ce * hw_out[0] * hw_out[1]
        return ResourceCost(flops, self.param_count)

    def forward_cached(self, x, params=None):
        p = self.params if params is None else params
        h, c_pre = nn.conv2d_forward(x, p["pre_w"], p["pre_b"])
        h, c_rs = nn.resize_forward(h, self.out_shape.hw)
        e, c_enc = nn.conv2d_forward(h, p["enc_w"], p["enc_b"])
        e, m = nn.relu_forward(e)
        d, c_dec = nn.conv2d_forward(e, p["dec_w"], p["dec_b"])
        return h + d, (c_pre, c_rs, c_enc, m, c_dec)

    def forward(self, x):
        return self.forward_cached(np.asarray(x, dtype=np.float64))[0]

    def backward(self, cache, dout, input_grad=True):
        c_pre, c_rs, c_enc, m, c_dec = cache
        de, dw_dec, db_dec = nn.conv2d_backward(dout, c_dec)
        de = nn.relu_backward(de, m)
        dh, dw_enc, db_enc = nn.conv2d_backward(de, c_enc)
        dh = dh + dout
        dh = nn.resize_backward(dh, c_rs)
        dx, dw_pre, db_pre = nn.conv2d_backward(dh, c_pre)
        grads = {"pre_w": dw_pre, "pre_b": db_pre, "enc_w": dw_enc, "enc_b": db_enc,
                 "dec_w": dw_dec, "dec_b": db_dec}
        return (dx if input_grad else None), grads

    def rounded(self):
        return Connector(self.in_shape, self.out_shape, self.r,
                         {k: nn.round_f32(v) for k, v in self.params.items()})


def channel_stats(batch):
    """Per-channel ``(mean, std)`` over batch and spatial positions."""
    x = np.asarray(batch, dtype=np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def build_connector(target_shape, expected_shape, r=4, seed=0, in_stats=None, out_stats=None) -> Connector:
    return Connector.build(target_shape, expected_shape, r, seed, in_stats, out_stats)


# --------------------------------------------------------------------------
# anchor-based repair loss

def anchor_margin(space: AnchorSpace, pairing: PairingSet):
    """Largest margin among the paired anchor classes.

    For each anchor class the margin is the distance to the nearest other
    anchor centroid minus its mean intra-class distance, both measured among
    the classes taking part in the pairing.
    """
    cls = sorted(set(pairing.source_classes))
    if len(cls) < 2:
        return space.m_max
    cen = np.stack([space.anchor_centroids[c] for c in cls])
    d = np.linalg.norm(cen[:, None] - cen[None], axis=2)
    np.fill_diagonal(d, np.inf)
    intra = np.array([space.anchor_stats.intra_d[c] for c in cls])
    return float((d.min(axis=1) - intra).max())


class RepairLoss(NamedTuple):
    value: float
    grad: np.ndarray
    skipped_pairs: int


def repair_loss(space: AnchorSpace, pairing: PairingSet, target_proj, labels, m_max=None,
                negatives="all") -> RepairLoss:
    """Centroid pull towards paired anchors plus a hinge on cross-class distances.

    ``loss = mean_pairs D(anchor_c, centroid_t) + (1/K) sum_{y_i != y_j} relu(M - D(z_i, z_j))``
    over ordered cross-class sample pairs, with ``M`` the largest margin among
    the paired anchor classes.  ``negatives="triggered"`` takes ``K`` as the
    number of pairs closer than ``M`` (the hinge is then a mean over active
    negatives); ``"all"`` takes every cross-class pair; an integer fixes
    ``K``.  Pairs whose target class is absent from the batch are skipped
    and counted.
    """
    fixed = isinstance(negatives, (int, np.integer)) and not isinstance(negatives, bool)
    if fixed and negatives < 1 or not fixed and negatives not in ("triggered", "all"):
        raise ConfigError(f"unknown negatives mode {negatives!r}")
    z = np.asarray(target_proj, dtype=np.float64)
    y = np.asarray(labels)
    margin = anchor_margin(space, pairing) if m_max is None else m_max
    grad = np.zeros_like(z)
    dists = []
    pull = np.zeros_like(z)
    skipped = 0
    for cs, ct in pairing.pairs:
        idx = y == ct
        cnt = int(idx.sum())
        if cnt == 0:
            skipped += 1
            continue
        diff = z[idx].mean(axis=0) - np.asarray(space.anchor_centroids[cs])
        d = float(np.linalg.norm(diff))
        dists.append(d)
        if d > 0:
            pull[idx] += diff / (d * cnt)
    value = 0.0
    if dists:
        value = math.fsum(dists) / len(dists)
        grad += pull / len(dists)

    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    cross = y[:, None] != y[None, :]
    active = cross & (dist < margin)
    if fixed:
        k = int(negatives)
    else:
        k = int(active.sum()) if negatives == "triggered" else int(cross.sum())
    if k and active.any():
        value += float((margin - dist[active]).sum()) / k
        coef = np.zeros_like(dist)
        nz = active & (dist > 0)
        coef[nz] = -1.0 / (dist[nz] * k)
        g = coef + coef.T
        grad += g.sum(axis=1)[:, None] * z - g @ z
    return RepairLoss(value, grad, skipped)


def triggered_pairs(z, labels, margin):
    """Number of ordered cross-class sample pairs closer than ``margin``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels)
    dist = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2))
    return int(((y[:, None] != y[None, :]) & (dist < margin)).sum())


# --------------------------------------------------------------------------
# repair

@dataclass
class RepairProblem:
    """Everything the repair objective needs besides connector parameters."""
    unit: LUnit
    space: AnchorSpace
    pairing: PairingSet
    transform: RotationAlignment
    x: np.ndarray
    y: np.ndarray
    m_max: Optional[float] = None
    negatives: object = "initial"

    def __post_init__(self):
        if self.m_max is None:
            self.m_max = anchor_margin(self.space, self.pairing)

    def fix_negatives(self, connector: Connector):
        """Resolve ``negatives="initial"``: freeze K at the pairs triggered by ``connector``."""
        if self.negatives == "initial":
            z = self.transform.apply(self.space.project(unit_mmcs(self.unit, connector, self.x)[:, self.space.channels]))
            self.negatives = max(1, triggered_pairs(z, self.y, self.m_max))
        return self.negatives

    def objective(self, connector: Connector, params=None, with_grad=True):
        if self.negatives == "initial":
            self.fix_negatives(connector)
        h, ccache = connector.forward_cached(self.x, params)
        a, ucache = unit_forward_cached(self.unit, h)
        m, mcache = nn.mmc_forward(a)
        ch = self.space.channels
        p = (m[:, ch] - self.space.mean) @ self.space.basis.T
        z = self.transform.apply(p)
        loss = repair_loss(self.space, self.pairing, z, self.y, self.m_max, self.negatives)
        if not with_grad:
            return loss.value
        dp = self.transform.scale * (loss.grad @ self.transform.rotation.T)
        dm = np.zeros_like(m)
        dm[:, ch] = dp @ self.space.basis
        da = nn.mmc_backward(dm, mcache)
        dh, _ = unit_backward(self.unit, ucache, da)
        _, grads = connector.backward(ccache, dh, input_grad=False)
        return loss.value, grads


@dataclass
class RepairOutcome:
    connector: Connector
    before_s: float
    after_s: float
    anchor_s: float
    loss_trace: list
    lr_trace: list = field(default_factory=list)
    channel_mask: Optional[np.ndarray] = None
    repaired_s: Optional[float] = None
    best_episode: int = 0
    pairing: Optional[PairingSet] = None
    transform: Optional[RotationAlignment] = None
    space: Optional[AnchorSpace] = None

    def __post_init__(self):
        if not self.loss_trace:
            raise ValueError("loss_trace must be non-empty")

    @property
    def best_loss(self):
        return self.loss_trace[self.best_episode]

    def trace_rows(self):
        lrs = list(self.lr_trace) + [float("nan")] * (len(self.loss_trace) - len(self.lr_trace))
        return [(e, l, lr) for e, (l, lr) in enumerate(zip(self.loss_trace, lrs))]


def unit_mmcs(unit, connector, x):
    h = connector.forward(x)
    a, _ = unit_forward_cached(unit, h)
    return mmc(a)


def anchor_score(space: AnchorSpace, pairing: PairingSet):
    """S-score of the projected anchors restricted to the paired source classes."""
    keep = np.isin(space.anchor_labels, pairing.source_classes)
    if len(set(pairing.source_classes)) < 2:
        return space.anchor_stats.s_score
    return silhouette(space.anchor_proj[keep], space.anchor_labels[keep])[0]


def prepare_alignment(space, unit, connector, x, y, pairing=None):
    """Initial projection scores and the fixed scale/rotation used during training."""
    m0 = unit_mmcs(unit, connector, x)[:, space.channels]
    p0 = space.project(m0)
    before = silhouette(p0, y)[0]
    if pairing is None:
        al = align_to_anchors(space, p0, y)
        pairing, transform = al.pairing, al.transform
    else:
        keep = np.isin(space.anchor_labels, pairing.source_classes)
        s = scale_align(space.anchor_proj[keep], space.anchor_labels[keep], p0, y)
        transform = rotation_align(space.anchor_centroids, centroids(p0, y), pairing, s)
    return before, pairing, transform


def repair(unit: LUnit, connector: Connector, space: AnchorSpace, support_x, support_y,
           cfg: TrainConfig = TrainConfig(), pairing: Optional[PairingSet] = None,
           removal=True, prepared=None, negatives="initial") -> RepairOutcome:
    """Train the connector in front of a frozen unit against the repair loss.

    Only connector parameters change; the unit's arrays are read-only.
    The scale/rotation alignment is computed once from the initial support
    projections and then held fixed.  The returned connector is the one from
    the best-loss episode.
    """
    x = np.asarray(support_x, dtype=np.float64)
    y = np.asarray(support_y)
    conn = connector.copy()
    if prepared is None:
        prepared = prepare_alignment(space, unit, conn, x, y, pairing)
    before, pairing, transform = prepared
    problem = RepairProblem(unit, space, pairing, transform, x, y, negatives=negatives)
    opt = cfg.make_optimizer()
    trace, lrs = [], []
    best_val, best_params, best_ep = math.inf, {k: v.copy() for k, v in conn.params.items()}, 0
    since_best = 0
    for ep in range(cfg.episodes):
        val, grads = problem.objective(conn)
        if not np.isfinite(val) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise RepairDivergenceError(f"non-finite repair loss at episode {ep}", ep)
        trace.append(float(val))
        if val < best_val:
            best_val, best_ep, since_best = val, ep, 0
            best_params = {k: v.copy() for k, v in conn.params.items()}
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
        lrs.append(opt.step(conn.params, grads, ep))
    final = problem.objective(conn, with_grad=False)
    if not np.isfinite(final):
        raise RepairDivergenceError("non-finite repair loss after training", len(trace))
    trace.append(float(final))
    if final < best_val:
        best_val, best_ep = final, len(trace) - 1
        best_params = {k: v.copy() for k, v in conn.params.items()}
    conn.params = best_params

    m = unit_mmcs(unit, conn, x)[:, space.channels]
    after = silhouette(space.project(m), y)[0] if cfg.episodes > 0 else before
    repaired = after
    mask = None
    if removal:
        mask, after = channel_removal(space, m, y)
    return RepairOutcome(conn, before, after, anchor_score(space, pairing), trace, lrs, mask,
                         repaired, best_ep, pairing, transform, space)


# --------------------------------------------------------------------------
# channel removal

def channel_removal(space: AnchorSpace, repaired_target_mmcs, labels, fractions=REMOVAL_FRACTIONS,
                    tie_tol=1e-12):
    """Keep the channel subset whose refitted anchor projection scores best.

    Channels are ranked by component weight; nested top-fraction subsets are
    scored by the silhouette of the target magnitudes projected into an
    anchor PCA refitted on those channels.  Ties go to the larger subset
    and the full set is always a candidate.  Returns ``(channels, score)``
    with channels given in layer coordinates.
    """
    m = np.asarray(repaired_target_mmcs, dtype=np.float64)
    y = np.asarray(labels)
    c = space.n_channels
    order = np.argsort(-space.component_weights, kind="stable")
    sizes = []
    for f in fractions:
        n = max(1, math.ceil(f * c - 1e-9))
        if n not in sizes:
            sizes.append(n)
    sizes.sort(reverse=True)
    if sizes[0] != c:
        sizes.insert(0, c)
    best_s, best_sub = -math.inf, None
    for n in sizes:
        sub = np.sort(order[:n])
        sp = space if n == c else space.restrict(sub)
        s = silhouette(sp.project(m[:, sub]), y)[0]
        if s > best_s + tie_tol:
            best_s, best_sub = s, sub
    return space.channels[best_sub], float(best_s)
