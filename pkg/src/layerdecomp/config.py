"""Run configuration: INI file sections merged with command-line overrides.

Example file::

    [model]
    d_model = 128
    n_blocks = 4

    [train]
    steps = 3000
    lr = 0.001
    composite_weight = 1.0

    [sample]
    n_steps = 20
    cfg_scale = 2.0
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .flow import SampleConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train), "sample": asdict(self.sample)}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _coerce(raw: str, current):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple) or current is None:
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts) if parts else None
    return raw.strip()


def _apply(obj_cls, base, values: dict):
    kwargs = asdict(base)
    names = {f.name for f in fields(obj_cls)}
    for key, raw in values.items():
        if key in ("layers_weight", "composite_weight") and obj_cls is TrainConfig:
            weights = dict(kwargs["loss_weights"])
            weights[key.split("_")[0]] = float(raw) if isinstance(raw, str) else raw
            kwargs["loss_weights"] = weights
            continue
        if key not in names:
            raise ConfigError(f"unknown {obj_cls.__name__} key {key!r}")
        kwargs[key] = _coerce(raw, kwargs[key]) if isinstance(raw, str) else raw
    try:
        return obj_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {obj_cls.__name__}: {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI config (optional) and apply ``{"section": {key: value}}`` overrides."""
    sections = {"model": {}, "train": {}, "sample": {}}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}] in {path}")
            sections[name].update(dict(parser.items(name)))
    for name, values in (overrides or {}).items():
        sections[name].update({k: v for k, v in values.items() if v is not None})
    return RunConfig(
        model=_apply(ModelConfig, ModelConfig(), sections["model"]),
        train=_apply(TrainConfig, TrainConfig(), sections["train"]),
        sample=_apply(SampleConfig, SampleConfig(), sections["sample"]),
    )
