"""Frozen source models segmented into L-units.

An L-unit is the atomic unit the search operates on: a single layer or an
inseparable block such as a residual block.  Units carry read-only
parameters and shape/resource metadata.  Forward and backward passes are
functional so the same code path trains a source model (mutable params
passed explicitly) and backpropagates through a frozen one.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import GenerationError, SegmentationError, ShapeError


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def size(self):
        return self.channels * self.height * self.width

    @property
    def hw(self):
        return (self.height, self.width)

    def as_tuple(self):
        return (self.channels, self.height, self.width)

    def __iter__(self):
        return iter(self.as_tuple())

    def __repr__(self):
        return f"TensorShape{self.as_tuple()}"


def as_shape(s) -> TensorShape:
    if isinstance(s, TensorShape):
        return s
    return TensorShape(*s)


@dataclass(frozen=True)
class ResourceCost:
    flops: int = 0
    params: int = 0

    def __post_init__(self):
        if self.flops < 0 or self.params < 0:
            raise ValueError("resource costs are non-negative")

    def __add__(self, other):
        if other == 0:
            return self
        return ResourceCost(self.flops + other.flops, self.params + other.params)

    __radd__ = __add__

    def weighted(self, ref: "ResourceCost", alpha=0.5):
        """alpha * flops/ref.flops + (1 - alpha) * params/ref.params"""
        return alpha * self.flops / ref.flops + (1 - alpha) * self.params / ref.params

    def to_dict(self):
        return {"flops": int(self.flops), "params": int(self.params)}


@dataclass(frozen=True)
class Op:
    kind: str                 # conv | avgpool | maxpool | dense | add
    in_shape: TensorShape
    out_shape: TensorShape
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    relu: bool = False
    role: str = "main"        # main | shortcut

    @property
    def has_params(self):
        return self.kind in ("conv", "dense")

    def param_shapes(self):
        if self.kind == "conv":
            kh, kw = self.kernel
            return [(self.out_shape.channels, self.in_shape.channels, kh, kw),
                    (self.out_shape.channels,)]
        if self.kind == "dense":
            return [(self.out_shape.channels, self.in_shape.size), (self.out_shape.channels,)]
        return []

    def cost(self, keep=None):
        """Resource cost, optionally with only ``keep`` output channels retained."""
        c_out = self.out_shape.channels if keep is None else keep
        ho, wo = self.out_shape.hw
        if self.kind == "conv":
            kh, kw = self.kernel
            flops = nn.conv_flops(self.in_shape.channels, c_out, (kh, kw), (ho, wo))
            params = (self.in_shape.channels * kh * kw + 1) * c_out
            return ResourceCost(flops, params)
        if self.kind == "dense":
            d = self.in_shape.size
            return ResourceCost(2 * d * c_out + c_out, (d + 1) * c_out)
        if self.kind == "avgpool":
            return ResourceCost(self.kernel[0] * self.kernel[1] * c_out * ho * wo, 0)
        if self.kind == "maxpool":
            return ResourceCost(max(1, self.kernel[0] * self.kernel[1] - 1) * c_out * ho * wo, 0)
        if self.kind == "add":
            return ResourceCost(c_out * ho * wo, 0)
        raise ValueError(self.kind)


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LUnit:
    """One frozen L-unit.

    ``params`` holds one ``(w, b)`` tuple per parametrised op (in op order);
    the arrays are read-only.
    """
    id: tuple
    kind: str                 # conv_block | residual_block | pool | dense
    ops: tuple
    params: tuple
    in_shape: TensorShape
    out_shape: TensorShape
    residual: bool = False

    @property
    def main_ops(self):
        return [k for k, op in enumerate(self.ops) if op.role == "main" and op.kind != "add"]

    @property
    def shortcut_op(self):
        for k, op in enumerate(self.ops):
            if op.role == "shortcut":
                return k
        return None

    @property
    def flops(self):
        return resource_of(self).flops

    @property
    def param_count(self):
        return resource_of(self).params

    @property
    def frozen_params(self):
        arrs = [a.ravel() for p in self.params for a in p]
        return np.concatenate(arrs) if arrs else np.zeros(0)

    def param_hash(self):
        h = hashlib.sha256()
        for p in self.params:
            for a in p:
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def forward(self, x):
        return forward_lunit(self, x)

    def mutable_params(self):
        return [[np.array(a) for a in p] for p in self.params]


@dataclass(frozen=True, eq=False)
class SourceModel:
    model_index: int
    lunits: tuple
    source_classes: tuple
    source_exemplars: np.ndarray
    exemplar_labels: np.ndarray
    name: str = "source"
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.lunits) < 2:
            raise SegmentationError("a source model needs at least 2 L-units")
        for a, b in zip(self.lunits[:-1], self.lunits[1:]):
            if a.out_shape != b.in_shape:
                raise SegmentationError(f"shape chain broken between {a.id} and {b.id}")

    @property
    def depth(self):
        return len(self.lunits)

    @property
    def input_shape(self):
        return self.lunits[0].in_shape

    @property
    def cost(self):
        return sum((resource_of(u) for u in self.lunits), ResourceCost())

    def forward(self, x, upto=None):
        """Outputs of every unit (or only through ``upto`` inclusive)."""
        outs = []
        h = x
        last = self.depth - 1 if upto is None else upto
        for u in self.lunits[:last + 1]:
            h = forward_lunit(u, h)
            outs.append(h)
        return outs

    def param_hash(self):
        h = hashlib.sha256()
        for u in self.lunits:
            h.update(u.param_hash().encode())
        return h.hexdigest()


# --------------------------------------------------------------------------
# functional forward / backward

def _op_forward(op, p, x):
    if op.kind == "conv":
        y, c = nn.conv2d_forward(x, p[0], p[1], op.stride, op.padding)
    elif op.kind == "dense":
        y, c = nn.dense_forward(x, p[0], p[1])
        y = y[:, :, None, None]
    elif op.kind == "avgpool":
        y, c = nn.avgpool_forward(x, op.kernel, op.stride, op.padding)
    elif op.kind == "maxpool":
        y, c = nn.maxpool_forward(x, op.kernel, op.stride, op.padding)
    else:
        raise ValueError(op.kind)
    m = None
    if op.relu:
        y, m = nn.relu_forward(y)
    return y, (c, m)


def _op_backward(op, p, cache, dy, param_grads):
    c, m = cache
    if m is not None:
        dy = nn.relu_backward(dy, m)
    if op.kind == "conv":
        dx, dw, db = nn.conv2d_backward(dy, c, param_grads)
        return dx, (dw, db)
    if op.kind == "dense":
        dx, dw, db = nn.dense_backward(dy[:, :, 0, 0], c, param_grads)
        return dx, (dw, db)
    if op.kind == "avgpool":
        return nn.avgpool_backward(dy, c), None
    return nn.maxpool_backward(dy, c), None


def _param_slots(unit):
    slots, k = {}, 0
    for idx, op in enumerate(unit.ops):
        if op.has_params:
            slots[idx] = k
            k += 1
    return slots


def unit_forward_cached(unit: LUnit, x, params=None):
    params = unit.params if params is None else params
    slots = _param_slots(unit)
    caches = {}
    h = x
    for idx in unit.main_ops:
        op = unit.ops[idx]
        h, caches[idx] = _op_forward(op, params[slots[idx]] if idx in slots else (), h)
    if not unit.residual:
        return h, caches
    sc = unit.shortcut_op
    if sc is not None:
        s, caches[sc] = _op_forward(unit.ops[sc], params[slots[sc]], x)
    else:
        s = x
    y, mask = nn.relu_forward(h + s)
    caches["add"] = mask
    return y, caches


def unit_backward(unit: LUnit, caches, dy, params=None, param_grads=False):
    """Returns ``(dx, grads)``; ``grads`` aligns with ``params`` (None if not requested)."""
    params = unit.params if params is None else params
    slots = _param_slots(unit)
    grads = [None] * len(params)
    dx_short = None
    if unit.residual:
        dy = nn.relu_backward(dy, caches["add"])
        sc = unit.shortcut_op
        if sc is not None:
            dx_short, g = _op_backward(unit.ops[sc], params[slots[sc]], caches[sc], dy, param_grads)
            grads[slots[sc]] = g
        else:
            dx_short = dy
    d = dy
    for idx in reversed(unit.main_ops):
        op = unit.ops[idx]
        d, g = _op_backward(op, params[slots[idx]] if idx in slots else (), caches[idx], d, param_grads)
        if idx in slots:
            grads[slots[idx]] = g
    if dx_short is not None:
        d = d + dx_short
    return d, (grads if param_grads else None)


def forward_lunit(unit: LUnit, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != unit.in_shape.as_tuple():
        raise ShapeError(f"unit {unit.id} expects (N, {unit.in_shape.as_tuple()}), got {x.shape}")
    y, _ = unit_forward_cached(unit, x)
    return y


def resource_of(unit: LUnit, keep=None) -> ResourceCost:
    """FLOPs (2 per MAC, plus bias adds) and exact parameter count of a unit.

    ``keep`` restricts the unit to that many output channels, as after
    channel removal: the ops producing the final channels shrink linearly.
    """
    final = _final_channel_ops(unit)
    total = ResourceCost()
    for idx, op in enumerate(unit.ops):
        total = total + op.cost(keep if (keep is not None and idx in final) else None)
    if unit.residual:
        total = total + ResourceCost((keep or unit.out_shape.channels) * unit.out_shape.height
                                     * unit.out_shape.width, 0)
    return total


def _final_channel_ops(unit):
    main = unit.main_ops
    if not main:
        return set()
    last_param = max((i for i in main if unit.ops[i].has_params), default=None)
    if last_param is None:
        final = set(main)
    else:
        final = {i for i in main if i >= last_param}
    sc = unit.shortcut_op
    if sc is not None:
        final.add(sc)
    return final


# --------------------------------------------------------------------------
# segmentation

def _layer_shape(layer, shape: TensorShape):
    kind = layer["kind"]
    if kind == "conv":
        k = nn.pair(layer.get("kernel", 3))
        s = nn.pair(layer.get("stride", 1))
        pad = nn.pair(layer.get("padding", (k[0] // 2, k[1] // 2)))
        ho, wo = nn.conv_out_hw(shape.height, shape.width, k, s, pad)
        if ho < 1 or wo < 1:
            raise SegmentationError(f"conv produces empty output from {shape}")
        out = TensorShape(layer["out_channels"], ho, wo)
        return Op("conv", shape, out, k, s, pad, bool(layer.get("relu", True)),
                  layer.get("role", "main"))
    if kind in ("avgpool", "maxpool"):
        k = nn.pair(layer.get("kernel", 2))
        s = nn.pair(layer.get("stride", k))
        pad = nn.pair(layer.get("padding", 0))
        ho, wo = nn.conv_out_hw(shape.height, shape.width, k, s, pad)
        if ho < 1 or wo < 1:
            raise SegmentationError(f"pool produces empty output from {shape}")
        return Op(kind, shape, TensorShape(shape.channels, ho, wo), k, s, pad,
                  bool(layer.get("relu", False)), "main")
    if kind == "dense":
        return Op("dense", shape, TensorShape(layer["out_features"], 1, 1),
                  relu=bool(layer.get("relu", False)))
    raise SegmentationError(f"unknown layer kind {kind!r}")


def _check_declared(layer, key, actual, where):
    if key in layer and as_shape(layer[key]) != actual:
        raise SegmentationError(
            f"{where}: declared {key} {tuple(layer[key])} but chain gives {actual.as_tuple()}")


def _group_blocks(layers):
    groups, prev = [], object()
    for k, layer in enumerate(layers):
        bid = layer.get("block")
        if bid is not None and bid == prev:
            groups[-1].append(k)
        else:
            groups.append([k])
        prev = bid
    return groups


def segment_model(model_spec, params=None, seed=0, model_index=0,
                  exemplars=None, exemplar_labels=None, source_classes=None) -> SourceModel:
    """Build a SourceModel from a layer list with explicit block boundaries.

    ``model_spec`` = ``{"input_shape": [C, H, W], "layers": [...]}``.  Each
    layer has a ``kind`` (conv, avgpool, maxpool, dense, add) and an optional
    ``block`` id; consecutive layers sharing a block id form one L-unit.  A
    block containing an ``add`` layer is a residual block: its ``role:
    "shortcut"`` conv (if any) maps the block input, and the add merges and
    applies ReLU.  Declared ``in_shape``/``out_shape`` entries are checked.
    """
    layers = model_spec["layers"]
    shape = as_shape(model_spec["input_shape"])
    rng = np.random.default_rng(seed)
    units = []
    pidx = 0
    for j, group in enumerate(_group_blocks(layers)):
        block_layers = [layers[k] for k in group]
        where = f"unit {j}"
        _check_declared(block_layers[0], "in_shape", shape, where)
        residual = any(l["kind"] == "add" for l in block_layers)
        ops = []
        h = shape
        for l in block_layers:
            if l["kind"] == "add" or l.get("role", "main") == "shortcut":
                continue
            _check_declared(l, "in_shape", h, where)
            op = _layer_shape(l, h)
            ops.append(op)
            h = op.out_shape
            _check_declared(l, "out_shape", h, where)
        if not ops:
            raise SegmentationError(f"{where}: empty block")
        n_main = len(ops)
        if residual:
            if block_layers[-1]["kind"] != "add":
                raise SegmentationError(f"{where}: add must close a residual block")
            # ReLU moves after the merge
            o = ops[-1]
            ops[-1] = Op(o.kind, o.in_shape, o.out_shape, o.kernel, o.stride, o.padding, False, o.role)
            shorts = [l for l in block_layers if l.get("role") == "shortcut"]
            if len(shorts) > 1:
                raise SegmentationError(f"{where}: at most one shortcut layer")
            if shorts:
                op = _layer_shape({**shorts[0], "relu": False}, shape)
                if op.out_shape != h:
                    raise SegmentationError(f"{where}: shortcut shape {op.out_shape} != main {h}")
                ops.append(Op(op.kind, op.in_shape, op.out_shape, op.kernel, op.stride,
                              op.padding, False, "shortcut"))
            elif shape != h:
                raise SegmentationError(f"{where}: identity shortcut needs matching shapes")
            _check_declared(block_layers[-1], "out_shape", h, where)
        kinds = {o.kind for o in ops}
        if residual:
            kind = "residual_block"
        elif "dense" in kinds:
            kind = "dense"
        elif "conv" in kinds:
            kind = "conv_block"
        else:
            kind = "pool"
        unit_params = []
        for op in ops:
            if not op.has_params:
                continue
            if params is not None:
                w, b = params[pidx]
                pidx += 1
                if tuple(np.shape(w)) != op.param_shapes()[0] or tuple(np.shape(b)) != op.param_shapes()[1]:
                    raise SegmentationError(f"{where}: parameter shape mismatch")
            else:
                wshape, bshape = op.param_shapes()
                fan_in = int(np.prod(wshape[1:]))
                # damp the last residual-branch conv so the block starts near identity
                gain = 0.5 if (residual and op is ops[n_main - 1]) else 1.0
                w = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=wshape)
                b = np.zeros(bshape)
            unit_params.append((_readonly(w), _readonly(b)))
        units.append(LUnit((model_index, j), kind, tuple(ops), tuple(unit_params),
                           shape, h, residual))
        shape = h
    if exemplars is None:
        exemplars = np.zeros((0,) + units[0].in_shape.as_tuple())
        exemplar_labels = np.zeros(0, dtype=int)
    if source_classes is None:
        source_classes = tuple(sorted(set(np.asarray(exemplar_labels).tolist())))
    return SourceModel(model_index, tuple(units), tuple(source_classes),
                       np.asarray(exemplars, float), np.asarray(exemplar_labels, int),
                       model_spec.get("name", f"source{model_index}"), model_spec)


# --------------------------------------------------------------------------
# reference specs

def plain_spec(input_shape, channels=(8, 8, 8, 8), kernel=3, stride=1):
    layers = [{"kind": "conv", "out_channels": c, "kernel": kernel, "stride": stride}
              for c in channels]
    return {"input_shape": list(input_shape), "layers": layers}


def resnet18_spec(input_shape=(3, 32, 32), width=8, one_d=False):
    """ResNet18 topology (stem + 8 basic blocks) at reduced width."""
    k3 = (1, 3) if one_d else 3
    k7 = (1, 7) if one_d else 7
    s2 = (1, 2) if one_d else 2
    pad1 = (0, 1) if one_d else 1
    layers = [
        {"kind": "conv", "out_channels": width, "kernel": k7, "stride": s2, "block": "stem"},
        {"kind": "maxpool", "kernel": k3, "stride": s2, "padding": pad1, "block": "stem"},
    ]
    c = width
    for stage, mult in enumerate((1, 2, 4, 8)):
        cout = width * mult
        for b in range(2):
            bid = f"layer{stage + 1}.{b}"
            stride = s2 if (stage > 0 and b == 0) else 1
            layers.append({"kind": "conv", "out_channels": cout, "kernel": k3, "stride": stride, "block": bid})
            layers.append({"kind": "conv", "out_channels": cout, "kernel": k3, "block": bid})
            if stride != 1 or cout != c:
                layers.append({"kind": "conv", "out_channels": cout, "kernel": 1, "stride": stride,
                               "padding": 0, "role": "shortcut", "block": bid})
            layers.append({"kind": "add", "block": bid})
            c = cout
    return {"name": "resnet18", "input_shape": list(input_shape), "layers": layers}


def synthetic_source_spec(shape, depth, max_channels=32, base_channels=8):
    """Conv blocks halving resolution down to 4, then residual blocks."""
    shape = as_shape(shape)
    if not 2 <= depth <= 9:
        raise ValueError("depth must be in [2, 9]")
    one_d = shape.height == 1
    k = (1, 3) if one_d else 3
    layers = []
    c = shape.channels
    h, w = shape.hw
    for j in range(depth):
        cout = min(base_channels * 2 ** j, max_channels)
        can_down = (w > 4) if one_d else (h > 4 and w > 4)
        if can_down or cout != c:
            s = ((1, 2) if one_d else 2) if can_down else 1
            layers.append({"kind": "conv", "out_channels": cout, "kernel": k, "stride": s, "block": f"u{j}"})
            if can_down:
                w = (w + 1) // 2
                if not one_d:
                    h = (h + 1) // 2
        else:
            layers.append({"kind": "conv", "out_channels": cout, "kernel": k, "block": f"u{j}"})
            layers.append({"kind": "conv", "out_channels": cout, "kernel": k, "block": f"u{j}"})
            layers.append({"kind": "add", "block": f"u{j}"})
        c = cout
    return {"input_shape": list(shape.as_tuple()), "layers": layers}


# --------------------------------------------------------------------------
# synthetic source models

def _train_classifier(units, params, x, y, n_classes, rng, epochs, lr=0.02, momentum=0.9, batch=32):
    head = nn.LinearHead(rng.normal(0, 0.1, (n_classes, units[-1].out_shape.channels)),
                         np.zeros(n_classes), np.zeros(units[-1].out_shape.channels),
                         np.ones(units[-1].out_shape.channels))
    vel = {}
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            h = x[idx]
            caches = []
            for u, p in zip(units, params):
                h, c = unit_forward_cached(u, h, p)
                caches.append(c)
            feats, mcache = nn.mmc_forward(h)
            logits, zs = head.forward(feats)
            _, dlog = nn.softmax_xent(logits, y[idx])
            dfeat, hgrads = head.backward(dlog, zs)
            d = nn.mmc_backward(dfeat, mcache)
            grads = {}
            for k in reversed(range(len(units))):
                d, g = unit_backward(units[k], caches[k], d, params[k], param_grads=True)
                for q, (dw, db) in enumerate(g):
                    grads[(k, q, 0)] = dw
                    grads[(k, q, 1)] = db
            for key, g in grads.items():
                v = vel.get(key, 0.0) * momentum + g
                vel[key] = v
                k, q, s = key
                params[k][q][s] -= lr * v
            for key in ("w", "b"):
                v = vel.get(key, 0.0) * momentum + hgrads[key]
                vel[key] = v
                getattr(head, key)[...] -= lr * v
    return head


def final_mmc_silhouette(model: SourceModel):
    from .stats import mmc, silhouette
    feats = mmc(model.forward(model.source_exemplars)[-1])
    return silhouette(feats, model.exemplar_labels)[0]


def generate_synthetic_source(seed, n_classes, shape, depth, *, model_index=0,
                              n_train=24, n_exemplars=12, epochs=12, max_rounds=3,
                              silhouette_floor=0.3, family=None) -> SourceModel:
    """Train a small conv source model on a synthetic class family.

    Deterministic in ``seed``.  Parameters are rounded to float32 so that
    the float32 weight blob round-trips exactly.
    """
    from . import synth
    if n_classes < 2:
        raise GenerationError("n_classes must be >= 2")
    if depth < 2:
        raise GenerationError("depth must be >= 2")
    shape = as_shape(shape)
    ss = np.random.SeedSequence([int(seed), 7919])
    data_ss, init_ss, train_ss = ss.spawn(3)
    family = synth.SourceFamily.create(np.random.default_rng(data_ss), n_classes, shape)
    data_rng = np.random.default_rng(data_ss.spawn(1)[0])
    xtr, ytr = family.sample(data_rng, n_train)
    xex, yex = family.sample(data_rng, n_exemplars)
    spec = synthetic_source_spec(shape, depth)
    spec["name"] = f"synthetic-{seed}"
    spec["seed"] = int(seed)
    spec["n_classes"] = int(n_classes)
    base = segment_model(spec, seed=int(init_ss.generate_state(1)[0]), model_index=model_index)
    units = base.lunits
    params = [u.mutable_params() for u in units]
    trng = np.random.default_rng(train_ss)
    score = -1.0
    for _ in range(max_rounds):
        _train_classifier(units, params, xtr, ytr, n_classes, trng, epochs)
        frozen = [[(nn.round_f32(w), nn.round_f32(b)) for w, b in p] for p in params]
        flat = [wb for p in frozen for wb in p]
        model = segment_model(spec, params=flat, model_index=model_index,
                              exemplars=nn.round_f32(xex), exemplar_labels=yex,
                              source_classes=tuple(range(n_classes)))
        score = final_mmc_silhouette(model)
        if score >= silhouette_floor:
            return model
    raise GenerationError(f"final-layer silhouette {score:.3f} below floor {silhouette_floor}", score)
