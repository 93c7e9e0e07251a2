"""Run configuration: JSON schema, validation, overrides, hashing and seed streams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .active import KernelSpec
from .losses import ChainContrastiveParams, LossWeights
from .lpda import ActiveConfig, LPDAConfig
from .source import SourceTrainConfig
from .synthdata import DomainSpec

SCHEMA_VERSION = 1

# --ablate keys and the LPDA switches they drive
ABLATION_KEYS = {
    "alg": ("use_alg",),
    "inter": ("use_inter",),
    "intra": ("use_intra",),
    "mixup": ("use_mixup",),
    "add_pl": ("add_pl",),
    "mis_pl": ("mis_pl",),
    "rev_pl": ("rev_pl",),
    "spmis": ("use_mixup", "add_pl", "mis_pl", "rev_pl"),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _standard_target() -> DomainSpec:
    return DomainSpec(**STANDARD_TARGET)


def _standard_source() -> DomainSpec:
    return DomainSpec(**STANDARD_SOURCE)


# the benchmark used by the acceptance grid
STANDARD_SOURCE = dict(n=2000, class_scale=0.7)
STANDARD_TARGET = dict(n=2000, class_scale=0.7, shift_angle=1.5, shift_offset=3.0, sigma_shift=0.3,
                       outlier_fraction=0.05)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    label: str = ""
    source_data: DomainSpec = field(default_factory=_standard_source)
    target_data: DomainSpec = field(default_factory=_standard_target)
    source: SourceTrainConfig = field(default_factory=SourceTrainConfig)
    active: ActiveConfig = field(default_factory=ActiveConfig)
    lpda: LPDAConfig = field(default_factory=LPDAConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if (self.source_data.d_in, self.source_data.n_classes) != (self.target_data.d_in, self.target_data.n_classes):
            raise ConfigError("target_data: d_in and n_classes must match source_data")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return _digest(self.to_dict())

    def stage1_hash(self) -> str:
        """Hash of everything the source stage depends on."""
        d = self.to_dict()
        return _digest({"seed": d["seed"], "source_data": d["source_data"], "source": d["source"]})

    def dataset_hash(self) -> str:
        d = self.to_dict()
        return _digest({"seed": d["seed"], "source_data": d["source_data"], "target_data": d["target_data"]})

    def stream(self, name: str) -> np.random.Generator:
        return stream(self.seed, name)

    def stream_seed(self, name: str) -> int:
        return int(self.stream(name).integers(2**63 - 1))


def stream(root: int, name: str) -> np.random.Generator:
    """Named sub-stream of the root seed; independent of every other name."""
    return np.random.default_rng([int(root), zlib.crc32(name.encode())])


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# parsing

_NESTED = {
    DomainSpec, SourceTrainConfig, ActiveConfig, LPDAConfig, LossWeights, ChainContrastiveParams, KernelSpec,
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path + '.' if path else ''}{key}"
        hint = hints[key]
        if hint in _NESTED:
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _check_scalar(hint, value, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _check_scalar(hint, value, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if origin is typing.Union or str(origin) == "types.UnionType":
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(inner[0], value, path) if len(inner) == 1 else value
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def save(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def apply_overrides(config: RunConfig, seed: int | None = None, budget: float | None = None,
                    rounds: int | None = None, ablate: list[str] | None = None, label: str | None = None) -> RunConfig:
    """Flag values win over file values, which win over defaults."""
    data = config.to_dict()
    if seed is not None:
        data["seed"] = seed
    if budget is not None:
        data["active"]["budget_fraction"] = budget
    if rounds is not None:
        data["active"]["rounds"] = rounds
    if label is not None:
        data["label"] = label
    for item in ablate or []:
        key, value = parse_ablation(item)
        for switch in ABLATION_KEYS[key]:
            data["lpda"][switch] = value
    return from_dict(data)


def parse_ablation(item: str) -> tuple[str, bool]:
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep:
        raise ConfigError(f"--ablate {item!r}: expected KEY=BOOL")
    if key not in ABLATION_KEYS:
        raise ConfigError(f"--ablate {key}: unknown switch (choose from {', '.join(sorted(ABLATION_KEYS))})")
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return key, True
    if lowered in ("0", "false", "no", "off"):
        return key, False
    raise ConfigError(f"--ablate {key}: {raw!r} is not a boolean")
