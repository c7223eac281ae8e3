"""Run configuration: one TOML file per run with DYGS_* environment overrides.

Sections map onto the dataclass configs ([scene], [corruption], [train],
[train.weights], [train.geom], ...). Environment variables override file
values as DYGS_<SECTION>__<KEY>=value (double underscore between nesting
levels), e.g. DYGS_TRAIN__MAIN_STEPS=500.
"""

from __future__ import annotations

import os
from dataclasses import fields, is_dataclass
from pathlib import Path

import tomli

from .errors import ConfigError
from .losses import GeomRegConfig, LocalPearsonConfig, LossWeights
from .scenegen import PriorCorruption, SceneGenConfig
from .trainer import DensifyConfig, TrainConfig

ENV_PREFIX = "DYGS_"

_NESTED = {"weights": LossWeights, "geom": GeomRegConfig,
           "local_pearson": LocalPearsonConfig, "densify": DensifyConfig}


def load_toml(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as f:
            return tomli.load(f)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{p}: invalid TOML: {e}") from e


def _coerce(value, target):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(target, int) and not isinstance(target, bool):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        seq = value if isinstance(value, (list, tuple)) else str(value).split(",")
        return tuple(type(target[0])(v) for v in seq)
    return value


def _apply_env(section, data):
    prefix = f"{ENV_PREFIX}{section.upper()}__"
    for key, raw in os.environ.items():
        if not key.startswith(prefix):
            continue
        path = key[len(prefix):].lower().split("__")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = raw
    return data


def _build(cls, data, where):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{where}]")
        if key in _NESTED and is_dataclass(getattr(defaults, key)):
            if not isinstance(value, dict):
                raise ConfigError(f"[{where}.{key}] must be a table")
            kwargs[key] = _build(_NESTED[key], value, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(value, getattr(defaults, key))
    return cls(**kwargs)


def _bad(key, section):
    raise ConfigError(f"unknown key '{key}' in [{section}]")


def scene_config(doc, overrides=None):
    data = _apply_env("scene", dict(doc.get("scene", {})))
    data.update(overrides or {})
    base = SceneGenConfig()
    kwargs = {}
    for k, v in data.items():
        if not hasattr(base, k):
            _bad(k, "scene")
        kwargs[k] = _coerce(v, getattr(base, k))
    return SceneGenConfig(**kwargs)


def corruption_config(doc):
    data = _apply_env("corruption", dict(doc.get("corruption", {})))
    base = PriorCorruption()
    kwargs = {}
    for k, v in data.items():
        if not hasattr(base, k):
            _bad(k, "corruption")
        kwargs[k] = _coerce(v, getattr(base, k))
    return PriorCorruption(**kwargs)


def train_config(doc, overrides=None):
    data = _apply_env("train", dict(doc.get("train", {})))
    data.update(overrides or {})
    return _build(TrainConfig, data, "train")
