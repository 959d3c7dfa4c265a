"""On-disk bundles: JSON manifest, float32 weight blob and an offset sidecar.

A bundle named ``model`` is three files::

    model.json        manifest (format, version, structure, content hashes)
    model.bin         little-endian float32 values, row-major, concatenated
    model.index.json  {name: {"offset": bytes, "shape": [...]}}

The manifest records the sha256 of the blob and of the index; loading
recomputes both and raises ``IntegrityError`` on mismatch.  Values are
expected to be float32-representable already (models round on creation),
which makes save -> load exact.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import nn
from .errors import IntegrityError
from .lws import RecombinedLayer, RecombinedModel
from .srr import Connector
from .zoo import LUnit, Op, SourceModel, as_shape, segment_model

FORMAT_VERSION = 1
SOURCE_FORMAT = "xtransfer.source"
RECOMBINED_FORMAT = "xtransfer.recombined"


def sha256_bytes(data: bytes):
    return hashlib.sha256(data).hexdigest()


def dumps(obj):
    """Canonical JSON used for every file the package writes."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class BlobWriter:
    def __init__(self):
        self.chunks = []
        self.index = {}
        self.offset = 0

    def add(self, name, arr):
        if name in self.index:
            raise ValueError(f"duplicate tensor {name!r}")
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        self.index[name] = {"offset": self.offset, "shape": list(a.shape)}
        raw = a.tobytes()
        self.chunks.append(raw)
        self.offset += len(raw)
        return name

    def blob(self):
        return b"".join(self.chunks)


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".json" else path
    return stem.with_suffix(".json"), stem.with_suffix(".bin"), stem.parent / (stem.name + ".index.json")


def write_bundle(path, manifest: dict, writer: BlobWriter):
    """Write the three files; returns the blob sha256."""
    mpath, bpath, ipath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    blob = writer.blob()
    index = dumps(writer.index).encode()
    manifest = dict(manifest)
    manifest["blob"] = {"file": bpath.name, "sha256": sha256_bytes(blob), "bytes": len(blob)}
    manifest["index"] = {"file": ipath.name, "sha256": sha256_bytes(index)}
    bpath.write_bytes(blob)
    ipath.write_bytes(index)
    mpath.write_text(dumps(manifest))
    return manifest["blob"]["sha256"]


def read_bundle(path, expected_format=None):
    """Load and verify a bundle; returns ``(manifest, tensors)``.

    Missing files raise ``FileNotFoundError``; hash mismatches raise
    ``IntegrityError``.
    """
    mpath, _, _ = _paths(path)
    manifest = json.loads(mpath.read_text())
    if expected_format is not None and manifest.get("format") != expected_format:
        raise IntegrityError(f"{mpath}: expected format {expected_format}, got {manifest.get('format')}")
    if manifest.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"{mpath}: unsupported version {manifest.get('version')}")
    blob = (mpath.parent / manifest["blob"]["file"]).read_bytes()
    if sha256_bytes(blob) != manifest["blob"]["sha256"]:
        raise IntegrityError(f"{mpath}: weight blob hash mismatch")
    raw_index = (mpath.parent / manifest["index"]["file"]).read_bytes()
    if sha256_bytes(raw_index) != manifest["index"]["sha256"]:
        raise IntegrityError(f"{mpath}: index hash mismatch")
    index = json.loads(raw_index)
    tensors = {}
    for name, ent in index.items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = ent["offset"] + 4 * count
        if end > len(blob):
            raise IntegrityError(f"{mpath}: tensor {name!r} runs past the blob")
        a = np.frombuffer(blob, dtype="<f4", count=count, offset=ent["offset"])
        tensors[name] = a.astype(np.float64).reshape(shape)
    return manifest, tensors


# --------------------------------------------------------------------------
# L-units

def _op_dict(op: Op):
    return {"kind": op.kind, "in_shape": op.in_shape.as_tuple(), "out_shape": op.out_shape.as_tuple(),
            "kernel": op.kernel, "stride": op.stride, "padding": op.padding, "relu": op.relu,
            "role": op.role}


def _op_from(d):
    return Op(d["kind"], as_shape(d["in_shape"]), as_shape(d["out_shape"]), tuple(d["kernel"]),
              tuple(d["stride"]), tuple(d["padding"]), bool(d["relu"]), d["role"])


def unit_dict(unit: LUnit, writer: BlobWriter, prefix):
    names = []
    for k, (w, b) in enumerate(unit.params):
        names.append([writer.add(f"{prefix}.p{k}.w", w), writer.add(f"{prefix}.p{k}.b", b)])
    return {"id": list(unit.id), "kind": unit.kind, "in_shape": unit.in_shape.as_tuple(),
            "out_shape": unit.out_shape.as_tuple(), "residual": unit.residual,
            "ops": [_op_dict(o) for o in unit.ops], "params": names, "param_hash": unit.param_hash()}


def unit_from(d, tensors) -> LUnit:
    params = []
    for wn, bn in d["params"]:
        w, b = tensors[wn].copy(), tensors[bn].copy()
        w.setflags(write=False)
        b.setflags(write=False)
        params.append((w, b))
    unit = LUnit(tuple(d["id"]), d["kind"], tuple(_op_from(o) for o in d["ops"]), tuple(params),
                 as_shape(d["in_shape"]), as_shape(d["out_shape"]), bool(d["residual"]))
    if unit.param_hash() != d["param_hash"]:
        raise IntegrityError(f"unit {d['id']}: parameter hash mismatch")
    return unit


# --------------------------------------------------------------------------
# source models

def save_source(model: SourceModel, path):
    """Write a source model bundle; returns the blob sha256."""
    w = BlobWriter()
    params = []
    for j, u in enumerate(model.lunits):
        for k, (wt, b) in enumerate(u.params):
            params.append([w.add(f"u{j}.p{k}.w", wt), w.add(f"u{j}.p{k}.b", b)])
    manifest = {
        "format": SOURCE_FORMAT, "version": FORMAT_VERSION, "name": model.name,
        "model_index": model.model_index, "seed": model.spec.get("seed"),
        "spec": model.spec, "source_classes": list(model.source_classes),
        "units": [{"kind": u.kind, "in_shape": u.in_shape.as_tuple(), "out_shape": u.out_shape.as_tuple(),
                   "param_hash": u.param_hash()} for u in model.lunits],
        "params": params,
        "exemplars": w.add("exemplars", model.source_exemplars),
        "exemplar_labels": [int(v) for v in model.exemplar_labels],
        "cost": model.cost.to_dict(),
    }
    return write_bundle(path, manifest, w)


def load_source(path) -> SourceModel:
    manifest, t = read_bundle(path, SOURCE_FORMAT)
    flat = [(t[wn], t[bn]) for wn, bn in manifest["params"]]
    model = segment_model(manifest["spec"], params=flat, model_index=manifest["model_index"],
                          exemplars=t[manifest["exemplars"]],
                          exemplar_labels=np.asarray(manifest["exemplar_labels"], dtype=int),
                          source_classes=tuple(manifest["source_classes"]))
    for u, ref in zip(model.lunits, manifest["units"]):
        if u.param_hash() != ref["param_hash"]:
            raise IntegrityError(f"{path}: unit {u.id} parameter hash mismatch")
    return model


# --------------------------------------------------------------------------
# recombined models

def save_recombined(model: RecombinedModel, path):
    """Write a recombined model bundle (self-contained: frozen units included)."""
    w = BlobWriter()
    layers = []
    for k, layer in enumerate(model.layers):
        c = layer.connector
        ent = {
            "model": layer.model, "depth": layer.depth,
            "unit": unit_dict(layer.unit, w, f"l{k}.unit"),
            "connector": {"in_shape": c.in_shape.as_tuple(), "out_shape": c.out_shape.as_tuple(), "r": c.r,
                          "params": {n: w.add(f"l{k}.conn.{n}", c.params[n]) for n in Connector.PARAM_NAMES}},
            "channel_mask": None if layer.channel_mask is None else [int(v) for v in layer.channel_mask],
            "anchor": None,
        }
        if layer.anchor is not None:
            ent["anchor"] = {"mean": w.add(f"l{k}.anchor.mean", layer.anchor["mean"]),
                             "basis": w.add(f"l{k}.anchor.basis", layer.anchor["basis"]),
                             "channels": [int(v) for v in layer.anchor["channels"]]}
        layers.append(ent)
    head = None
    if model.head is not None:
        h = model.head
        head = {n: w.add(f"head.{n}", getattr(h, n)) for n in ("w", "b", "mu", "sd")}
    manifest = {
        "format": RECOMBINED_FORMAT, "version": FORMAT_VERSION, "layers": layers, "head": head,
        "provenance": model.provenance, "finetune_reverted": model.finetune_reverted,
        "total_cost": model.total_cost.to_dict(), "frozen_hash": model.frozen_hash(),
    }
    return write_bundle(path, manifest, w)


def load_recombined(path) -> RecombinedModel:
    manifest, t = read_bundle(path, RECOMBINED_FORMAT)
    layers = []
    for ent in manifest["layers"]:
        unit = unit_from(ent["unit"], t)
        cd = ent["connector"]
        conn = Connector(cd["in_shape"], cd["out_shape"], cd["r"], {n: t[v] for n, v in cd["params"].items()})
        mask = None if ent["channel_mask"] is None else np.asarray(ent["channel_mask"], dtype=int)
        anchor = None
        if ent.get("anchor") is not None:
            a = ent["anchor"]
            anchor = {"mean": t[a["mean"]], "basis": t[a["basis"]], "channels": np.asarray(a["channels"], dtype=int)}
        layers.append(RecombinedLayer(ent["model"], ent["depth"], unit, conn, mask, anchor))
    head = None
    if manifest["head"] is not None:
        head = nn.LinearHead(*(t[manifest["head"][n]] for n in ("w", "b", "mu", "sd")))
    model = RecombinedModel(layers, head, manifest["provenance"], manifest["finetune_reverted"])
    if model.frozen_hash() != manifest["frozen_hash"]:
        raise IntegrityError(f"{path}: frozen layer hash mismatch")
    return model
