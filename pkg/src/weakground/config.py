"""Experiment configuration: a strict-schema dataclass tree.

Unknown keys are errors, not warnings; a silent typo in a loss-weight name
would invalidate an experiment.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .res import OracleConfig

VALID_SOURCES = ("dark", "dino", "sam")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    count: int = 2500
    split_fractions: tuple[float, float, float] = (0.8, 0.0, 0.2)
    seed: int = 0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    feature_dim: int = 64       # shared width D of fused/combined maps
    text_dim: int = 64
    contrast_dim: int = 64
    aspp_channels: int = 16
    top_k: int = 2
    temperature: float = 0.1
    alpha: float = 0.3
    lambda_atc: float = 1.0
    lambda_inc: float = 50.0
    lambda_scl: float = 1.0
    lambda_res: float = 0.0     # standalone ungated BCE term; off by default
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 15
    schedule: str = "cosine"
    pretrain_epochs: int = 15
    pretrain_lr: float = 2e-3
    dvfe: bool = True
    scl: bool = True
    isl: bool = True
    bank_sources: tuple[str, ...] = ("dark", "dino", "sam")
    dvfe_residual: bool = False
    atc_literal: bool = False
    cosine_sim: bool = False
    gate_source: str = "pseudo_mask"
    neg_pool: str = "topk"
    freeze_pseudo_after: int | None = None
    precision: str = "float32"
    seed: int = 1

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def validate(self) -> None:
        for name in ("lambda_atc", "lambda_inc", "lambda_scl", "lambda_res"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unsupported precision {self.precision!r}")
        if self.gate_source not in ("predicted_mask", "pseudo_mask"):
            raise ConfigError(f"unsupported gate_source {self.gate_source!r}")
        if self.neg_pool not in ("topk", "top1"):
            raise ConfigError(f"unsupported neg_pool {self.neg_pool!r}")
        if not self.bank_sources or len(set(self.bank_sources)) != len(self.bank_sources):
            raise ConfigError("bank_sources must be a non-empty set of distinct names")
        for s in self.bank_sources:
            if s not in VALID_SOURCES:
                raise ConfigError(f"unknown bank source {s!r}")
        if self.data.image_size % 32:
            raise ConfigError("image_size must be divisible by 32")
        if not 2 <= self.data.min_objects <= self.data.max_objects <= 5:
            raise ConfigError("object count range must satisfy 2 <= min <= max <= 5")
        if abs(sum(self.data.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.freeze_pseudo_after is not None and self.freeze_pseudo_after < 0:
            raise ConfigError("freeze_pseudo_after must be >= 0 or null")
        try:
            self.oracle.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e


_NESTED = {"data": DataConfig, "oracle": OracleConfig}
_TUPLE_FIELDS = {"split_fractions", "bank_sources"}


def _from_dict(cls, d: dict, path: str = ""):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object at {path or 'config root'}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        where = f" under {path}" if path else ""
        raise ConfigError(f"unknown config keys{where}: {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if f.name in _NESTED:
            v = _from_dict(_NESTED[f.name], v, f.name)
        elif f.name in _TUPLE_FIELDS:
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def from_dict(d: dict) -> Config:
    cfg = _from_dict(Config, d)
    cfg.validate()
    return cfg


def to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def to_json(cfg: Config) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2) + "\n"


def from_json(text: str) -> Config:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad config JSON: {e}") from e
    return from_dict(d)


def load(path) -> Config:
    return from_json(Path(path).read_text())


def save(cfg: Config, path) -> None:
    Path(path).write_text(to_json(cfg))


def apply_overrides(cfg: Config, overrides) -> Config:
    """Apply `key=value` strings (dotted paths for nested sections); values
    parse as JSON with a plain-string fallback. Unknown keys are rejected."""
    d = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"bad override {item!r}, expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        node[parts[-1]] = value
    return from_dict(d)
