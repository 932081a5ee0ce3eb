"""Run configuration: one schema-validated key-value file, hashed everywhere.

A run config bundles the dataset spec, architecture dims, augmentation
distribution, training hyperparameters, and probe settings.  Files are JSON
or TOML by extension; unknown sections or keys are rejected.  The sha256 of
the canonical JSON form is embedded in every artifact the run emits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

try:  # stdlib on 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib
from pathlib import Path

from ..augment import AugmentationSpec
from ..evaluation import ProbeConfig
from ..nets import ArchConfig
from ..training import TrainConfig, hash_config
from .datasets import SyntheticDatasetSpec

__all__ = [
    "ConfigError",
    "RunConfig",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "run_config_hash",
]


class ConfigError(ValueError):
    """Invalid run configuration file."""


@dataclass
class RunConfig:
    data: SyntheticDatasetSpec
    arch: ArchConfig
    augment: AugmentationSpec
    train: TrainConfig
    probe: ProbeConfig
    transfer: SyntheticDatasetSpec | None = None  # optional transfer-eval dataset

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(
            data=SyntheticDatasetSpec(),
            arch=ArchConfig(),
            augment=AugmentationSpec(),
            train=TrainConfig(),
            probe=ProbeConfig(),
        )

    def validate(self) -> None:
        self.data.validate()
        self.arch.validate()
        self.augment.validate()
        self.train.validate()
        if self.transfer is not None:
            self.transfer.validate()
        if self.arch.input_dim != self.data.input_dim:
            raise ConfigError(
                f"arch.input_dim ({self.arch.input_dim}) != data.input_dim ({self.data.input_dim})"
            )
        if self.probe.epochs < 0:
            raise ConfigError("probe.epochs must be >= 0")


_SECTIONS = {
    "data": SyntheticDatasetSpec,
    "arch": ArchConfig,
    "augment": AugmentationSpec,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "transfer": SyntheticDatasetSpec,
}

_TUPLE_FIELDS = {"encoder_hidden", "crop_scale", "aspect_ratio", "jitter_params", "jitter_vs_gray_odds"}


def _build_section(name: str, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{name}' must be a table/object")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"section '{name}' has unknown keys: {sorted(unknown)}")
    coerced = {
        k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in payload.items()
    }
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        if name == "transfer":
            parts[name] = _build_section(name, cls, raw[name]) if name in raw else None
        else:
            parts[name] = _build_section(name, cls, raw.get(name, {}))
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {
        "data": asdict(cfg.data),
        "arch": asdict(cfg.arch),
        "augment": asdict(cfg.augment),
        "train": asdict(cfg.train),
        "probe": asdict(cfg.probe),
    }
    if cfg.transfer is not None:
        out["transfer"] = asdict(cfg.transfer)
    return json.loads(json.dumps(out))  # JSON-native types (tuples -> lists)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            raw = tomllib.loads(path.read_text())
        else:
            raw = json.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    return config_from_dict(raw)


def run_config_hash(cfg: RunConfig) -> str:
    return hash_config(config_to_dict(cfg))
