"""Flat JSON run configuration covering model and training fields.

``seed`` is shared: it seeds both parameter initialisation and training.
Nested model sub-configs are flattened (``num_levels``, ``kernel_size``,
``layers_per_block``, ``growth_rate``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

from .dense import DenseMsfConfig
from .errors import ConfigError
from .focal import FocalFuseConfig
from .segnet import ModelConfig
from .train import TrainConfig

_MODEL_KEYS = {"variant", "base_filters", "patch", "seed", "cross_scale"}
_FOCAL_KEYS = {f.name for f in fields(FocalFuseConfig)}
_DENSE_KEYS = {f.name for f in fields(DenseMsfConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
KNOWN_KEYS = _MODEL_KEYS | _FOCAL_KEYS | _DENSE_KEYS | _TRAIN_KEYS


def parse_config(flat: dict) -> tuple[ModelConfig, TrainConfig]:
    if not isinstance(flat, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    pick = lambda keys: {k: flat[k] for k in keys if k in flat}  # noqa: E731
    try:
        model = ModelConfig(**pick(_MODEL_KEYS), focal=FocalFuseConfig(**pick(_FOCAL_KEYS)),
                            dense=DenseMsfConfig(**pick(_DENSE_KEYS)))
        train = TrainConfig(**pick(_TRAIN_KEYS))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    try:
        flat = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(flat)


def flatten(model: ModelConfig, train: TrainConfig) -> dict:
    d = {k: v for k, v in model.to_dict().items() if k not in ("focal", "dense")}
    d.update(asdict(model.focal))
    d.update(asdict(model.dense))
    d.update(asdict(train))
    return d
