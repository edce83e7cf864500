"""JSON config files: one document mirroring the four config dataclasses.

Sections: "model", "training", "maintenance", "loss_weights", optional
"data" with stream paths. Unknown keys anywhere are rejected so typos fail
loudly instead of silently training the wrong run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .memory_maintenance import MaintenanceConfig
from .memory_objectives import LossWeights
from .model import ModelConfig

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"loss_weights", "maintenance"}
_SECTIONS = ("model", "training", "maintenance", "loss_weights", "data")


def _build(cls, payload: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**payload)


def model_config_from_dict(payload: dict) -> ModelConfig:
    payload = dict(payload)
    lw = payload.pop("loss_weights", None)
    mc = payload.pop("maintenance", None)
    unknown = set(payload) - _MODEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown keys in model config: {sorted(unknown)}")
    kwargs: dict[str, Any] = dict(payload)
    if lw is not None:
        kwargs["loss_weights"] = _build(LossWeights, lw, "loss_weights")
    if mc is not None:
        kwargs["maintenance"] = _build(MaintenanceConfig, mc, "maintenance")
    return ModelConfig(**kwargs)


def model_config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def load_config_file(path: str | Path):
    """Returns (ModelConfig, TrainConfig, data section dict)."""
    from .training import TrainConfig

    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")

    model_section = dict(doc.get("model", {}))
    if "loss_weights" in doc:
        model_section["loss_weights"] = doc["loss_weights"]
    if "maintenance" in doc:
        model_section["maintenance"] = doc["maintenance"]
    model_config = model_config_from_dict(model_section)
    train_config = _build(TrainConfig, doc.get("training", {}), "training")
    data = doc.get("data", {})
    extra = set(data) - {"train_stream", "val_stream"}
    if extra:
        raise ConfigurationError(f"{path}: unknown keys in data: {sorted(extra)}")
    return model_config, train_config, data


def config_hash(model_config: ModelConfig, train_config=None) -> str:
    doc = {"model": model_config_to_dict(model_config)}
    if train_config is not None:
        doc["training"] = dataclasses.asdict(train_config)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
