"""Versioned JSON experiment configuration.

Unknown keys are rejected; every field has a default so ``{"version": 1}``
is a complete config.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .bench import SourceSpec, TargetSpec, validate_specs
from .errors import ConfigError
from .srr import TrainConfig

CONFIG_VERSION = 1


def load_schema(name):
    return json.loads(resources.files("xtransfer").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_against(doc, name):
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{name} invalid at {where}: {e.message}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    sources: SourceSpec = SourceSpec()
    target: TargetSpec = TargetSpec()
    shots: tuple = (3, 5, 10)
    folds: Optional[tuple] = None          # None: every held-out user
    search_depth: int = 3
    pca_components: int = 2
    budget: float = 1.0
    removal_enabled: bool = True
    pre_search: bool = True
    compare_input: bool = False
    alpha: float = 0.5
    finetune_epochs: int = 30
    baselines: tuple = ("tl", "ft")
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        validate_specs(self.sources, self.target)
        if self.folds is not None:
            bad = [f for f in self.folds if not 0 <= f < self.target.n_users]
            if bad:
                raise ConfigError(f"folds {bad} out of range for {self.target.n_users} users")
        if self.pca_components >= self.target.n_classes * min(self.shots):
            raise ConfigError("pca_components must be below the support-set size")

    @property
    def fold_list(self):
        return list(range(self.target.n_users)) if self.folds is None else list(self.folds)

    def to_dict(self):
        d = {"version": CONFIG_VERSION}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in dataclasses.asdict(v).items()}
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, doc):
        validate_against(doc, "config")
        kw = {k: v for k, v in doc.items() if k != "version"}
        if "sources" in kw:
            kw["sources"] = _spec(SourceSpec, kw["sources"])
        if "target" in kw:
            kw["target"] = _spec(TargetSpec, kw["target"])
        if "train" in kw:
            kw["train"] = TrainConfig(**kw["train"])
        for k in ("shots", "baselines"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if kw.get("folds") is not None:
            kw["folds"] = tuple(kw["folds"])
        return cls(**kw)


def _spec(cls, d):
    d = dict(d)
    if "shape" in d:
        d["shape"] = tuple(d["shape"])
    return cls(**d)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(doc)
