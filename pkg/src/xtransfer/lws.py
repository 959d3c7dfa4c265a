"""Layer-wise search: pools, value/overhead selection, pre-search check and recombination.

The controller walks a window of candidate L-units (all source models x a
span of depths), repairs some of them, keeps the best resource-adjusted one
if it improves on the previous selection and fits the budget, and moves on.
The candidates themselves are produced by an evaluator, so the same
controller runs on real repairs (``RepairEvaluator``) and on scripted values
(``ScriptedEvaluator``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from . import nn
from .anchor import fit_anchor_space
from .errors import ConfigError, DegenerateRateError, EmptySearchResult, SearchBudgetExhausted
from .srr import (Connector, RepairOutcome, TrainConfig, anchor_score, build_connector,
                  channel_stats, prepare_alignment, repair)
from .stats import mmc, silhouette
from .zoo import ResourceCost, as_shape, resource_of, unit_backward, unit_forward_cached

RANGE_MIN, RANGE_MAX, RANGE_INIT = 0.2, 1.0, 0.5


# --------------------------------------------------------------------------
# closed-form pieces

def resource_coefficient(n, L):
    """RC(n) = exp(n / (L - 2) - 2) + 1."""
    if L < 3:
        raise ConfigError(f"resource coefficient needs L >= 3, got {L}")
    if n < 1:
        raise ConfigError(f"recombined index must be >= 1, got {n}")
    return math.exp(n / (L - 2) - 2) + 1


def adjusted_overhead(res, pool_max_res, n, L):
    """R = Res * RC(n) / max Res(P)."""
    if not pool_max_res > 0:
        raise ConfigError("pool has zero cost")
    return res * resource_coefficient(n, L) / pool_max_res


def layer_value(outcome):
    return float(outcome.after_s)


def observed_rate(outcome=None, *, after=None, before=None, anchor=None):
    """(After - Before) / Anchor, clamped to [0, 1]."""
    if outcome is not None:
        after, before, anchor = outcome.after_s, outcome.before_s, outcome.anchor_s
    if anchor == 0:
        raise DegenerateRateError("anchor S-score is zero")
    return float(np.clip((after - before) / anchor, 0.0, 1.0))


def update_range(rng_prev, rate_est_prev, rate_obs_prev):
    """range_n = (1 +/- rate_est) * range_{n-1}, clamped to [0.2, 1].

    The sign is + when the previous estimate fell short of the observed rate.
    """
    u = 1.0 if rate_est_prev < rate_obs_prev else -1.0
    return float(np.clip((1.0 + u * rate_est_prev) * rng_prev, RANGE_MIN, RANGE_MAX))


def filter_size(search_range, pool_size):
    return max(1, min(pool_size, math.ceil(search_range * pool_size - 1e-9)))


# --------------------------------------------------------------------------
# repair-rate growth model

@dataclass
class RateModel:
    a: float = 0.0
    b: float = 0.0
    observations: list = field(default_factory=list)
    fitted: bool = False
    mse: float = float("nan")
    fallback: bool = False

    def observe(self, n, rate):
        self.observations.append((int(n), float(rate)))
        if len({m for m, _ in self.observations}) >= 2:
            fit = fit_rate_model(self.observations)
            self.a, self.b, self.mse, self.fallback = fit.a, fit.b, fit.mse, fit.fallback
            self.fitted = True

    def raw(self, n):
        return math.exp(self.a * n) + self.b

    def predict(self, n):
        """Estimated rate, optimistic (1) until two distinct depths are observed."""
        if not self.fitted:
            return 1.0
        return float(np.clip(self.raw(n), 0.0, 1.0))


A_GRID = np.linspace(-2.0, 2.0, 81)
B_GRID = np.linspace(-1.0, 1.0, 41)


def fit_rate_model(observations, n_starts=5) -> RateModel:
    """Least-squares fit of exp(a n) + b with a in [-2, 2], b in [-1, 1].

    A deterministic grid supplies the starting points; each is refined by a
    bounded trust-region least-squares solve and the best result kept.
    """
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or len(obs) < 2 or len(np.unique(obs[:, 0])) < 2:
        raise DegenerateRateError("rate fit needs at least two observations at distinct n")
    n, r = obs[:, 0], obs[:, 1]

    def resid(p):
        return np.exp(p[0] * n) + p[1] - r

    e = np.exp(A_GRID[:, None] * n[None, :])                    # (A, M)
    mse = ((e[:, None, :] + B_GRID[None, :, None] - r) ** 2).mean(axis=2)
    flat = np.argsort(mse, axis=None, kind="stable")[:n_starts]
    best, best_mse, ok = None, math.inf, False
    for f in flat:
        ia, ib = np.unravel_index(f, mse.shape)
        x0 = np.array([A_GRID[ia], B_GRID[ib]])
        grid_mse = float(mse[ia, ib])
        if grid_mse < best_mse:
            best, best_mse = x0, grid_mse
        try:
            sol = least_squares(resid, x0, bounds=([-2.0, -1.0], [2.0, 1.0]), xtol=1e-14, ftol=1e-14,
                                gtol=1e-14, method="trf")
        except (ValueError, FloatingPointError):
            continue
        m = float(np.mean(resid(sol.x) ** 2))
        if sol.success and m <= best_mse:
            best, best_mse, ok = sol.x, m, True
    return RateModel(float(best[0]), float(best[1]), [tuple(o) for o in observations], True,
                     best_mse, not ok)


# --------------------------------------------------------------------------
# search bookkeeping

@dataclass
class Candidate:
    model: int
    depth: int
    cost: ResourceCost
    res: float
    R: float = float("nan")
    before_s: float = float("nan")
    anchor_s: float = float("nan")
    est_after_s: float = float("nan")
    repaired: bool = False
    outcome: object = None
    probe: object = None

    @property
    def key(self):
        return (self.model, self.depth)

    @property
    def value(self):
        return layer_value(self.outcome)

    @property
    def vr(self):
        return self.value / self.R


@dataclass
class Selected:
    model: int
    depth: int
    outcome: object
    res: float
    cost: ResourceCost
    action: str


@dataclass
class SearchState:
    budget: float
    L: int
    selected: list = field(default_factory=list)
    prev_s: float = -1.0
    range: float = RANGE_INIT
    spent: float = 0.0
    spent_cost: ResourceCost = field(default_factory=ResourceCost)
    rate_model: RateModel = field(default_factory=RateModel)
    repairs: int = 0

    @property
    def n(self):
        return len(self.selected) + 1

    @property
    def remaining(self):
        return self.budget - self.spent


@dataclass
class SearchConfig:
    depth_span: int = 3
    budget: float = 1.0
    pre_search: bool = True
    fixed_range: Optional[float] = None
    alpha: float = 0.5
    compare_input: bool = False     # first selection must beat the raw input S-score

    def __post_init__(self):
        if self.depth_span < 1:
            raise ConfigError("depth_span must be >= 1")
        if not self.budget > 0:
            raise ConfigError("budget must be positive")


@dataclass
class SearchResult:
    state: SearchState
    trace: list
    stopped: str

    @property
    def selected(self):
        return self.state.selected

    def trace_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.trace)


def action_label(prev: Optional[Selected], model, depth):
    if prev is None:
        return "init"
    if model != prev.model:
        return "cross"
    return "continue" if depth == prev.depth + 1 else "skip"


def _f(x):
    x = float(x)
    return x if math.isfinite(x) else None


def select_from_pool(state: SearchState, candidates):
    """Apply the value rule to repaired candidates.

    Among repaired candidates whose cost still fits the budget, take the
    largest V/R (ties: smaller Res, then smaller (model, depth)); accept it
    only if its S-score beats the previous selection.  Returns
    ``(candidate or None, reason)``.
    """
    repaired = [c for c in candidates if c.repaired]
    feasible = [c for c in repaired if state.spent + c.res <= state.budget]
    if not feasible:
        return None, "budget"
    best = min(feasible, key=lambda c: (-c.vr, c.res, c.model, c.depth))
    if not best.value > state.prev_s:
        return None, "no_gain"
    return best, "accept"


def pre_search_filter(state: SearchState, candidates, rate_est, search_range):
    """Candidates to repair: the top ``ceil(range * |pool|)`` by estimated S-score."""
    for c in candidates:
        hi = max(c.before_s, c.anchor_s)
        c.est_after_s = float(np.clip(c.before_s + rate_est * c.anchor_s, c.before_s, hi))
    ranked = sorted(candidates, key=lambda c: (-c.est_after_s, c.res, c.model, c.depth))
    return ranked[:filter_size(search_range, len(candidates))]


def run_search(evaluator, cfg: SearchConfig, mapper=map) -> SearchResult:
    """Pool-by-pool search over the evaluator's zoo.

    Raises ``SearchBudgetExhausted`` when nothing could ever be afforded and
    ``EmptySearchResult`` when no layer was selected for any other reason.
    """
    depths = evaluator.depths
    L = max(depths)
    input_s = float(evaluator.initial_score())
    # init always selects a starting layer unless asked to beat the raw input
    state = SearchState(budget=cfg.budget, L=L, prev_s=input_s if cfg.compare_input else -1.0)
    if cfg.fixed_range is not None:
        state.range = float(cfg.fixed_range)
    trace = []
    j = 0
    stopped = "depth"
    pool_idx = 0
    while j < L:
        keys = [(i, d) for i, depth in enumerate(depths) for d in range(j, min(j + cfg.depth_span, depth))]
        if not keys:
            stopped = "pools"
            break
        n = state.n
        cands = []
        for i, d in keys:
            cost = evaluator.cost(i, d)
            cands.append(Candidate(i, d, cost, evaluator.res(cost)))
        if all(state.spent + c.res > state.budget for c in cands):
            stopped = "budget"
            trace.append({"pool": pool_idx, "start_depth": j, "n": n, "decision": "stop",
                          "reason": "budget", "spent": _f(state.spent), "budget_remaining": _f(state.remaining)})
            break
        pool_max = max(c.res for c in cands)
        for c in cands:
            c.R = adjusted_overhead(c.res, pool_max, n, L)
            c.probe = evaluator.probe(i=c.model, depth=c.depth)
            c.before_s, c.anchor_s = c.probe.before_s, c.probe.anchor_s
        rate_est = state.rate_model.predict(n)
        if cfg.pre_search:
            chosen = pre_search_filter(state, cands, rate_est, state.range)
        else:
            chosen = list(cands)
            for c in cands:
                c.est_after_s = float("nan")
        outcomes = list(mapper(evaluator.repair, [(c.model, c.depth, c.probe) for c in chosen]))
        for c, out in zip(chosen, outcomes):
            c.outcome = out
            c.repaired = True
        state.repairs += len(chosen)
        best, reason = select_from_pool(state, cands)
        rec = {
            "pool": pool_idx, "start_depth": j, "n": n, "L": L, "n_at_limit": n >= L, "input_s": _f(input_s),
            "range": _f(state.range), "rate_est": _f(rate_est), "prev_s": _f(state.prev_s),
            "candidates": [{
                "model": c.model, "depth": c.depth, "flops": c.cost.flops, "params": c.cost.params,
                "res": _f(c.res), "R": _f(c.R), "before_s": _f(c.before_s), "anchor_s": _f(c.anchor_s),
                "est_after_s": _f(c.est_after_s), "repaired": c.repaired,
                "after_s": _f(c.outcome.after_s) if c.repaired else None,
                "V": _f(c.value) if c.repaired else None, "VR": _f(c.vr) if c.repaired else None,
            } for c in cands],
            "decision": "accept" if best is not None else "discard", "reason": reason,
        }
        if best is not None:
            prev = state.selected[-1] if state.selected else None
            action = action_label(prev, best.model, best.depth)
            committed = evaluator.commit(best.model, best.depth, best.outcome)
            committed_res = min(evaluator.res(committed), best.res)
            state.selected.append(Selected(best.model, best.depth, best.outcome, committed_res, committed, action))
            state.spent += committed_res
            state.spent_cost = state.spent_cost + committed
            obs = observed_rate(best.outcome) if best.outcome.anchor_s != 0 else None
            if obs is not None:
                if cfg.pre_search and cfg.fixed_range is None and state.rate_model.fitted:
                    state.range = update_range(state.range, rate_est, obs)
                state.rate_model.observe(n, obs)
            state.prev_s = best.value
            rec.update({"selected": [best.model, best.depth], "action": action, "rate_obs": _f(obs) if obs is not None else None})
            j = best.depth + 1
        else:
            rec.update({"selected": None, "action": None})
            j += 1
        rec.update({"spent": _f(state.spent), "budget_remaining": _f(state.remaining),
                    "range_after": _f(state.range), "repairs_total": state.repairs})
        trace.append(rec)
        pool_idx += 1
    if not state.selected:
        if stopped == "budget":
            raise SearchBudgetExhausted("budget exhausted before any layer was selected", state, trace)
        raise EmptySearchResult("no layer improved on the starting S-score", trace)
    return SearchResult(state, trace, stopped)


# --------------------------------------------------------------------------
# scripted evaluator (property tests, efficiency studies)

@dataclass
class ScriptedProbe:
    before_s: float
    anchor_s: float


@dataclass
class ScriptedOutcome:
    before_s: float
    after_s: float
    anchor_s: float


class ScriptedEvaluator:
    """Deterministic pseudo-random layer values keyed by (seed, model, depth, n).

    ``after = before + rate * anchor`` with a rate growing with n, plus a
    per-layer quality term, so the repair-rate model has something to learn.
    ``bias`` optionally adds a per-(model, depth) offset to the quality.
    """

    def __init__(self, depths, seed=0, cost_scale=1.0, initial=0.0, bias=None, noise=0.05,
                 growth=(0.35, -0.3)):
        self.depths = list(depths)
        self.seed = int(seed)
        self.cost_scale = float(cost_scale)
        self.initial = float(initial)
        self.bias = bias or {}
        self.noise = noise
        self.growth = growth
        self.n = 1
        self.repair_calls = 0
        self._costs = {}
        rng = np.random.default_rng([self.seed, 17])
        for i, depth in enumerate(self.depths):
            for d in range(depth):
                self._costs[(i, d)] = ResourceCost(int(rng.integers(1_000, 50_000) * (1 + d)),
                                                   int(rng.integers(100, 5_000) * (1 + d)))
        self.ref = sum(self._costs.values(), ResourceCost())

    def initial_score(self):
        return self.initial

    def cost(self, i, d):
        return self._costs[(i, d)]

    def res(self, cost):
        return cost.weighted(self.ref) * self.cost_scale

    def _rng(self, i, d):
        return np.random.default_rng([self.seed, i, d, self.n])

    def probe(self, i, depth):
        r = self._rng(i, depth)
        q = r.uniform(0.1, 0.6) + self.bias.get((i, depth), 0.0)
        anchor = float(np.clip(q + r.uniform(0.1, 0.4), 0.05, 1.0))
        before = float(np.clip(q * r.uniform(0.2, 0.8) + 0.05 * self.n, -1.0, anchor))
        return ScriptedProbe(before, anchor)

    def repair(self, args):
        i, d, probe = args
        self.repair_calls += 1
        r = self._rng(i, d)
        r.uniform(size=3)
        a, b = self.growth
        rate = np.clip(math.exp(a * self.n) + b + r.normal(0, self.noise), 0.0, 1.0)
        after = probe.before_s + rate * (probe.anchor_s - probe.before_s) + rate * 0.05
        return ScriptedOutcome(probe.before_s, float(min(after, 1.0)), probe.anchor_s)

    def commit(self, i, d, outcome):
        self.n += 1
        return self._costs[(i, d)]


def scripted_search(depths, seed, cfg: SearchConfig, **kw):
    ev = ScriptedEvaluator(depths, seed, **kw)
    return run_search(ev, cfg), ev


# --------------------------------------------------------------------------
# real evaluator

@dataclass
class RepairProbe:
    before_s: float
    anchor_s: float
    connector: Connector
    prepared: tuple
    space: object


class RepairEvaluator:
    """Runs SRR on real source models for the search controller.

    Holds the current support features (raw target data before the first
    selection, then the output of the last selected layer) and caches anchor
    spaces and input statistics of every source layer.
    """

    def __init__(self, sources, support_x, support_y, train_cfg: TrainConfig = TrainConfig(),
                 removal=True, pca_components=2, seed=0, r=4, alpha=0.5, negatives="initial"):
        self.sources = list(sources)
        self.x0 = np.asarray(support_x, dtype=np.float64)
        self.y = np.asarray(support_y)
        self.train_cfg = train_cfg
        self.removal = removal
        self.k = pca_components
        self.seed = int(seed)
        self.r = r
        self.alpha = alpha
        self.negatives = negatives
        self.ref = max(self.sources, key=lambda s: s.cost.flops + s.cost.params).cost
        self._spaces = {}
        self._in_stats = {}
        for i, src in enumerate(self.sources):
            outs = src.forward(src.source_exemplars)
            ins = [src.source_exemplars] + outs[:-1]
            for d, (a, b) in enumerate(zip(ins, outs)):
                self._in_stats[(i, d)] = channel_stats(a)
                self._spaces[(i, d)] = fit_anchor_space(mmc(b), src.exemplar_labels, k=self.k, layer_id=(i, d))
        self.h = self.x0
        self.layers = []

    @property
    def depths(self):
        return [s.depth for s in self.sources]

    def space(self, i, d):
        return self._spaces[(i, d)]

    def initial_score(self):
        m = mmc(self.x0)
        mc = m - m.mean(axis=0)
        _, _, vt = np.linalg.svd(mc, full_matrices=False)
        return silhouette(mc @ vt[:self.k].T, self.y)[0]

    def res(self, cost: ResourceCost):
        return cost.weighted(self.ref, self.alpha)

    def _connector(self, i, d):
        unit = self.sources[i].lunits[d]
        seed = int(np.random.SeedSequence([self.seed, i, d, len(self.layers)]).generate_state(1)[0])
        return build_connector(self.h.shape[1:], unit.in_shape, self.r, seed,
                               channel_stats(self.h), self._in_stats[(i, d)])

    def cost(self, i, d):
        unit = self.sources[i].lunits[d]
        return resource_of(unit) + self._connector(i, d).cost()

    def probe(self, i, depth):
        unit = self.sources[i].lunits[depth]
        conn = self._connector(i, depth)
        sp = self._spaces[(i, depth)]
        before, pairing, transform = prepare_alignment(sp, unit, conn, self.h, self.y)
        return RepairProbe(before, anchor_score(sp, pairing), conn, (before, pairing, transform), sp)

    def repair(self, args):
        i, d, probe = args
        unit = self.sources[i].lunits[d]
        return repair(unit, probe.connector, probe.space, self.h, self.y, self.train_cfg,
                      removal=self.removal, prepared=probe.prepared, negatives=self.negatives)

    def commit(self, i, d, outcome: RepairOutcome):
        unit = self.sources[i].lunits[d]
        mask = outcome.channel_mask
        if mask is not None and len(mask) == unit.out_shape.channels:
            mask = None
        sp = outcome.space
        anchor = None if sp is None else {"mean": sp.mean, "basis": sp.basis, "channels": sp.channels}
        layer = RecombinedLayer(i, d, unit, outcome.connector, mask, anchor)
        self.layers.append(layer)
        self.h = layer.forward(self.h)
        return layer.cost


# --------------------------------------------------------------------------
# recombined model

@dataclass
class RecombinedLayer:
    model: int
    depth: int
    unit: object
    connector: Connector
    channel_mask: Optional[np.ndarray] = None
    anchor: Optional[dict] = None      # mean/basis/channels of the layer's anchor space

    @property
    def out_channels(self):
        return self.unit.out_shape.channels if self.channel_mask is None else len(self.channel_mask)

    @property
    def out_shape(self):
        s = self.unit.out_shape
        return as_shape((self.out_channels, s.height, s.width))

    @property
    def cost(self):
        keep = None if self.channel_mask is None else len(self.channel_mask)
        return resource_of(self.unit, keep) + self.connector.cost()

    def forward_cached(self, x, params=None):
        h, ccache = self.connector.forward_cached(x, params)
        a, ucache = unit_forward_cached(self.unit, h)
        if self.channel_mask is not None:
            a = a[:, self.channel_mask]
        return a, (ccache, ucache)

    def forward(self, x):
        return self.forward_cached(x)[0]

    def backward(self, cache, dout, params=None):
        ccache, ucache = cache
        if self.channel_mask is not None:
            full = np.zeros(dout.shape[:1] + self.unit.out_shape.as_tuple())
            full[:, self.channel_mask] = dout
            dout = full
        dh, _ = unit_backward(self.unit, ucache, dout)
        return self.connector.backward(ccache, dh)


@dataclass
class RecombinedModel:
    layers: list
    head: Optional[nn.LinearHead] = None
    provenance: dict = field(default_factory=dict)
    finetune_reverted: bool = False

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.connector.in_shape != a.out_shape:
                raise ConfigError("recombined layers do not chain")

    @property
    def input_shape(self):
        return self.layers[0].connector.in_shape

    def features(self, x):
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = layer.forward(h)
        return mmc(h)

    def logits(self, x):
        return self.head.forward(self.features(x))[0]

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    @property
    def total_cost(self):
        c = sum((layer.cost for layer in self.layers), ResourceCost())
        if self.head is not None:
            c = c + ResourceCost(self.head.flops, self.head.param_count)
        return c

    def frozen_hash(self):
        import hashlib
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.unit.param_hash().encode())
        return h.hexdigest()

    def trainable(self):
        p = {}
        for k, layer in enumerate(self.layers):
            for name, v in layer.connector.params.items():
                p[(k, name)] = v
        if self.head is not None:
            p[("head", "w")] = self.head.w
            p[("head", "b")] = self.head.b
        return p

    def loss_and_grads(self, x, y):
        h = np.asarray(x, dtype=np.float64)
        caches = []
        for layer in self.layers:
            h, c = layer.forward_cached(h)
            caches.append(c)
        feats, mcache = nn.mmc_forward(h)
        logits, zs = self.head.forward(feats)
        loss, dlog = nn.softmax_xent(logits, y)
        dfeat, hg = self.head.backward(dlog, zs)
        grads = {("head", "w"): hg["w"], ("head", "b"): hg["b"]}
        d = nn.mmc_backward(dfeat, mcache)
        for k in reversed(range(len(self.layers))):
            d, g = self.layers[k].backward(caches[k], d)
            for name, v in g.items():
                grads[(k, name)] = v
        return loss, grads, logits

    def copy(self):
        layers = [RecombinedLayer(l.model, l.depth, l.unit, l.connector.copy(),
                                  None if l.channel_mask is None else l.channel_mask.copy(), l.anchor)
                  for l in self.layers]
        return RecombinedModel(layers, None if self.head is None else self.head.copy(),
                               dict(self.provenance), self.finetune_reverted)

    def rounded(self):
        m = self.copy()
        for layer in m.layers:
            layer.connector = layer.connector.rounded()
        if m.head is not None:
            h = m.head
            m.head = nn.LinearHead(nn.round_f32(h.w), nn.round_f32(h.b), nn.round_f32(h.mu), nn.round_f32(h.sd))
        return m


def train_head(features, labels, n_classes, cfg: TrainConfig, seed=0):
    """Linear head on fixed features, full-batch SGD with the shared schedule."""
    rng = np.random.default_rng(seed)
    head = nn.LinearHead.init(features, n_classes, rng)
    opt = cfg.make_optimizer()
    for ep in range(cfg.episodes):
        logits, zs = head.forward(features)
        _, dlog = nn.softmax_xent(logits, labels)
        _, g = head.backward(dlog, zs)
        opt.step(head.params(), g, ep)
    return head


def attach_head(model: RecombinedModel, support_x, support_y, n_classes, cfg: TrainConfig, seed=0):
    model.head = train_head(model.features(support_x), np.asarray(support_y), n_classes, cfg, seed)
    return model


def post_finetune(model: RecombinedModel, support_x, support_y, cfg: TrainConfig, epochs=30) -> RecombinedModel:
    """Brief joint training of connectors and head; frozen units untouched.

    A non-finite loss reverts to the incoming parameters and sets
    ``finetune_reverted``.
    """
    if model.head is None:
        raise ConfigError("post fine-tuning needs an attached head")
    out = model.copy()
    if epochs <= 0:
        return out
    y = np.asarray(support_y)
    opt = cfg.make_optimizer()
    params = out.trainable()
    for ep in range(epochs):
        loss, grads, _ = out.loss_and_grads(support_x, y)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            back = model.copy()
            back.finetune_reverted = True
            return back
        opt.step(params, grads, ep)
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        back = model.copy()
        back.finetune_reverted = True
        return back
    return out


@dataclass
class XTransferResult:
    model: RecombinedModel
    search: SearchResult
    pre_finetune: RecombinedModel


def xtransfer(sources, support_x, support_y, n_classes, search_cfg: SearchConfig = SearchConfig(),
              train_cfg: TrainConfig = TrainConfig(), removal=True, pca_components=2, seed=0,
              finetune_epochs=30, mapper=map, provenance=None) -> XTransferResult:
    """Search, recombine, attach a head and post fine-tune."""
    ev = RepairEvaluator(sources, support_x, support_y, train_cfg, removal, pca_components, seed,
                         alpha=search_cfg.alpha)
    result = run_search(ev, search_cfg, mapper)
    model = RecombinedModel(list(ev.layers), provenance=dict(provenance or {}))
    attach_head(model, support_x, support_y, n_classes, train_cfg, seed)
    pre = model.rounded()
    tuned = post_finetune(pre, support_x, support_y, train_cfg, finetune_epochs).rounded()
    return XTransferResult(tuned, result, pre)

