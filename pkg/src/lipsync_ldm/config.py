"""Run configuration files: YAML or JSON, strict keys, one section per command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError

SECTIONS = ("synth", "preprocess", "syncnet", "stage1", "stage2", "ablate", "eval", "infer")


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: Optional[str] = None
    device: str = "cpu"
    synth: dict = field(default_factory=dict)
    preprocess: dict = field(default_factory=dict)
    syncnet: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    ablate: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    infer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.device != "cpu":
            raise ConfigError(f"only the cpu device is supported, got {self.device!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        for name in SECTIONS:
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"section {name!r} must be a mapping")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: ({} if v is None and k in SECTIONS else v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(data or {})


def section_keys(section: dict, allowed, name: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return dict(section)
