"""Run configuration: YAML files, dotted CLI overrides, resolved-config dumps."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .detector import DetectorConfig
from .losses import LossWeights
from .train import OptimConfig


@dataclass
class RunConfig:
    data_dir: str = "data/shapes"
    out_dir: str = "runs/run0"
    seed: int = 0
    stage: str = "base"
    episode_classes: int = 5  # support classes per episode (C)
    shots: int = 2  # support examples per class (K)
    queries_per_episode: int = 2
    batch_episodes: int = 4
    steps: int = 15000
    checkpoint_every: int = 500
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)


_SECTIONS = {"detector": DetectorConfig, "optim": OptimConfig, "loss": LossWeights}


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _SECTIONS[key](**value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(config)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f) or {})


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True)


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.field=value`` / ``field=value`` pairs on top of a config."""
    doc = config_to_dict(config)
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(node[parts[-1]], raw)
    return config_from_dict(doc)
