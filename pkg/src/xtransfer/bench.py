"""Synthetic cross-modality benchmark, few-shot tasks, metrics and reference baselines.

Sources are small conv models trained on 2D image-like class families; the
target is a 1D multichannel sensing family with per-"user" perturbations.
Folds hold out one user: its samples form the query set and the support set
is drawn from the remaining users.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DegenerateMetricError, GenerationError
from .srr import TrainConfig, default_reshape, default_reshape_cost
from .stats import mmc
from .synth import TargetFamily
from .zoo import (ResourceCost, SourceModel, as_shape, generate_synthetic_source, unit_backward,
                  unit_forward_cached)


@dataclass(frozen=True)
class SourceSpec:
    n_classes: int = 16
    shape: tuple = (3, 32, 32)
    depth: int = 4
    count: int = 2


@dataclass(frozen=True)
class TargetSpec:
    n_classes: int = 5
    shape: tuple = (6, 1, 128)
    n_users: int = 5
    n_query: int = 10           # per class


def validate_specs(source_spec: SourceSpec, target_spec: TargetSpec):
    if source_spec.n_classes <= target_spec.n_classes:
        raise ConfigError("source class count must exceed target class count")
    if source_spec.count < 1:
        raise ConfigError("need at least one source model")
    if target_spec.n_users < 2:
        raise ConfigError("need at least two target users for held-out folds")
    try:
        s, t = as_shape(source_spec.shape), as_shape(target_spec.shape)
    except Exception as e:
        raise ConfigError(str(e)) from e
    if s == t:
        raise ConfigError("target modality must differ in shape from the source")
    if t.height != 1:
        raise ConfigError("target family is 1D: shape must be (C, 1, W)")


@dataclass
class FewShotTask:
    n_way: int
    k_shot: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    modality: dict
    fold_id: int
    support_ids: np.ndarray = None
    query_ids: np.ndarray = None

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1:
            raise ConfigError("n_way and k_shot must be positive")
        if len(self.support_y) != self.n_way * self.k_shot:
            raise ConfigError("support must hold exactly n_way * k_shot samples")
        if set(np.unique(self.support_y)) != set(np.unique(self.query_y)):
            raise ConfigError("support and query class sets differ")
        if self.support_ids is not None and self.query_ids is not None:
            if set(map(tuple, self.support_ids)) & set(map(tuple, self.query_ids)):
                raise ConfigError("support and query overlap")

    def digest(self):
        h = hashlib.sha256()
        for a in (self.support_x, self.support_y, self.query_x, self.query_y):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class TaskStream:
    """Deterministic few-shot tasks from one target family.

    Every sample carries an id ``(user, index)`` drawn from a per-user
    sample pool, so support and query never share a sample.
    """

    def __init__(self, seed, spec: TargetSpec):
        self.seed = int(seed)
        self.spec = spec
        ss = np.random.SeedSequence([self.seed, 104729])
        self.family = TargetFamily.create(np.random.default_rng(ss), spec.n_classes, spec.shape, spec.n_users)

    @property
    def n_folds(self):
        return self.spec.n_users

    def task(self, k_shot, fold, rep=0) -> FewShotTask:
        spec = self.spec
        if not 0 <= fold < spec.n_users:
            raise ConfigError(f"fold {fold} out of range")
        rng = np.random.default_rng([self.seed, int(k_shot), int(fold), int(rep), 31])
        others = [u for u in range(spec.n_users) if u != fold]
        # support: k per class, each sample from a random non-held-out user
        users = rng.choice(others, size=(spec.n_classes, k_shot))
        xs, ys, ids = [], [], []
        for u in others:
            cnt = int((users == u).sum())
            if cnt == 0:
                continue
            per_class = (users == u).sum(axis=1)
            x, y = self.family.sample(np.random.default_rng([self.seed, u, int(k_shot), int(fold), int(rep)]),
                                      u, int(per_class.max()))
            for c in range(spec.n_classes):
                idx = np.flatnonzero(y == c)[:per_class[c]]
                xs.append(x[idx])
                ys.append(y[idx])
                ids += [(u, int(i)) for i in idx]
        sx, sy = np.concatenate(xs), np.concatenate(ys)
        order = np.argsort(sy, kind="stable")
        sx, sy = sx[order], sy[order]
        s_ids = np.array(ids)[order]
        qx, qy = self.family.sample(np.random.default_rng([self.seed, fold, 99991, int(rep)]),
                                    fold, spec.n_query)
        q_ids = np.array([(fold, 10_000 + i) for i in range(len(qy))])
        return FewShotTask(spec.n_classes, int(k_shot), sx, sy, qx, qy,
                           {"shape": list(spec.shape), "seed": self.seed, "family": "sinusoid-mixture-1d"},
                           int(fold), s_ids, q_ids)


def make_sources(seed, spec: SourceSpec, attempts=8):
    """Generate ``spec.count`` source models; a model failing the separability floor is regenerated."""
    sources = []
    for i in range(spec.count):
        last = None
        for a in range(attempts):
            sub = int(np.random.SeedSequence([int(seed), i, a]).generate_state(1)[0])
            try:
                sources.append(generate_synthetic_source(sub, spec.n_classes, spec.shape, spec.depth,
                                                         model_index=i))
                break
            except GenerationError as e:
                last = e
        else:
            raise last
    return sources


def make_synthetic_benchmark(seed, source_spec: SourceSpec = SourceSpec(), target_spec: TargetSpec = TargetSpec()):
    validate_specs(source_spec, target_spec)
    return make_sources(seed, source_spec), TaskStream(seed, target_spec)


# --------------------------------------------------------------------------
# metrics

def accuracy(model, task_or_x, y=None):
    if y is None:
        x, y = task_or_x.query_x, task_or_x.query_y
    else:
        x = task_or_x
    y = np.asarray(y)
    n_cls = getattr(model, "n_classes", None)
    if n_cls is not None and int(y.max()) >= n_cls:
        raise ConfigError(f"model predicts {n_cls} classes, labels go up to {int(y.max())}")
    return float(np.mean(model.predict(x) == y))


def atr(acc, flops, params, norm_ref: ResourceCost, alpha=0.5):
    """Accuracy / (alpha * flops/ref + (1 - alpha) * params/ref)."""
    if not (norm_ref.flops > 0 and norm_ref.params > 0):
        raise ConfigError("ATR reference must have positive flops and params")
    denom = alpha * flops / norm_ref.flops + (1 - alpha) * params / norm_ref.params
    if denom <= 0:
        raise ConfigError("model cost must be positive")
    return acc / denom


def overfitting(train_acc, test_acc):
    if train_acc == 0:
        raise DegenerateMetricError("train accuracy is zero")
    return abs(train_acc - test_acc) / train_acc


# --------------------------------------------------------------------------
# baselines

class BackboneModel:
    """Default-reshaped input -> full source backbone -> channel magnitudes -> linear head."""

    def __init__(self, source: SourceModel, head: nn.LinearHead, params=None):
        self.source = source
        self.head = head
        self.params = params or [u.mutable_params() for u in source.lunits]

    @property
    def n_classes(self):
        return self.head.n_classes

    def _forward(self, x, cache=False):
        h = default_reshape(x, self.source.input_shape)
        caches = []
        for u, p in zip(self.source.lunits, self.params):
            h, c = unit_forward_cached(u, h, p)
            caches.append(c)
        return h, caches

    def features(self, x):
        return mmc(self._forward(x)[0])

    def predict(self, x):
        return np.argmax(self.head.forward(self.features(x))[0], axis=1)

    def cost(self, in_shape):
        c = default_reshape_cost(in_shape, self.source.input_shape) + self.source.cost
        return c + ResourceCost(self.head.flops, self.head.param_count)


def baseline_tl(source: SourceModel, task: FewShotTask, cfg: TrainConfig = TrainConfig(), seed=0):
    """Frozen backbone, linear head trained on the support set."""
    from .lws import train_head
    model = BackboneModel(source, None)
    feats = model.features(task.support_x)
    model.head = train_head(feats, task.support_y, task.n_way, cfg, seed)
    return model


def baseline_ft(source: SourceModel, task: FewShotTask, cfg: TrainConfig = TrainConfig(), seed=0):
    """Backbone and head trained together on the support set."""
    from .lws import train_head
    model = BackboneModel(source, None)
    feats = model.features(task.support_x)
    model.head = train_head(feats, task.support_y, task.n_way, TrainConfig(**{**asdict(cfg), "episodes": 0}), seed)
    y = np.asarray(task.support_y)
    opt = cfg.make_optimizer()
    units = source.lunits
    model.params = [[[w, b] for w, b in p] for p in model.params]
    snapshot = None
    for ep in range(cfg.episodes):
        h, caches = model._forward(task.support_x)
        f, mcache = nn.mmc_forward(h)
        logits, zs = model.head.forward(f)
        loss, dlog = nn.softmax_xent(logits, y)
        if not np.isfinite(loss):
            if snapshot is not None:
                model.params, model.head = snapshot
            break
        snapshot = ([[(w.copy(), b.copy()) for w, b in p] for p in model.params], model.head.copy())
        df, hg = model.head.backward(dlog, zs)
        grads = {("head", "w"): hg["w"], ("head", "b"): hg["b"]}
        params = {("head", "w"): model.head.w, ("head", "b"): model.head.b}
        d = nn.mmc_backward(df, mcache)
        for k in reversed(range(len(units))):
            d, g = unit_backward(units[k], caches[k], d, model.params[k], param_grads=True)
            for q, (dw, db) in enumerate(g):
                grads[(k, q, 0)], grads[(k, q, 1)] = dw, db
                params[(k, q, 0)], params[(k, q, 1)] = model.params[k][q][0], model.params[k][q][1]
        opt.step(params, grads, ep)
    return model


# --------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    method: str
    accuracy: float
    atr: float
    overfit: float
    flops: int
    params: int
    train_accuracy: float
    norm_ref: dict
    per_seed: list = field(default_factory=list)
    shot: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")
        if self.atr < 0:
            raise ValueError("atr must be non-negative")

    def to_dict(self):
        return asdict(self)


def evaluate(method, model, task: FewShotTask, cost: ResourceCost, norm_ref: ResourceCost, alpha=0.5, seed=0):
    acc = accuracy(model, task)
    tr = accuracy(model, task.support_x, task.support_y)
    try:
        ov = overfitting(tr, acc)
    except DegenerateMetricError:
        ov = float("nan")
    return {"method": method, "shot": task.k_shot, "seed": seed, "fold": task.fold_id,
            "accuracy": acc, "train_accuracy": tr, "overfit": ov,
            "atr": atr(acc, cost.flops, cost.params, norm_ref, alpha),
            "flops": int(cost.flops), "params": int(cost.params)}


def _mean(rows, key):
    vals = [r[key] for r in rows if r[key] == r[key]]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(rows, norm_ref: ResourceCost):
    """Average per-seed rows into one report per (method, shot)."""
    out = []
    keys = sorted({(r["method"], r["shot"]) for r in rows})
    for method, shot in keys:
        rs = [r for r in rows if r["method"] == method and r["shot"] == shot]
        out.append(EvalReport(method, _mean(rs, "accuracy"), _mean(rs, "atr"), _mean(rs, "overfit"),
                              int(round(_mean(rs, "flops"))), int(round(_mean(rs, "params"))),
                              _mean(rs, "train_accuracy"),
                              {"flops": norm_ref.flops, "params": norm_ref.params,
                               "anchor": "largest source backbone"}, rs, shot))
    return out


def long_format_csv(rows):
    """Plot-ready rows: method, shot, seed, metric, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "shot", "seed", "metric", "value"])
    for r in rows:
        for m in ("accuracy", "train_accuracy", "overfit", "atr", "flops", "params"):
            w.writerow([r["method"], r["shot"], r["seed"], m, repr(float(r[m]))])
    return buf.getvalue()


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "shot", "accuracy", "atr", "overfit", "flops", "params", "train_accuracy"])
    for r in reports:
        w.writerow([r.method, r.shot, repr(r.accuracy), repr(r.atr), repr(r.overfit), r.flops, r.params,
                    repr(r.train_accuracy)])
    return buf.getvalue()


def reports_json(reports, header=None):
    doc = {"header": dict(header or {}), "reports": [r.to_dict() for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)
