"""Experiment configuration: a flat dataclass, loaded from YAML plus CLI overrides."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .networks import config_hash

log = logging.getLogger(__name__)

MODES = ("fedadg", "fedavg", "no_rp", "no_onehot", "fixed_ref")
REFERENCES = ("adaptive", "gaussian", "uniform", "laplace")
SUITES = ("rotated_two_moons", "shifted_gaussian_mixture")

# execution-only keys: they never change results, so they stay out of the hash
_UNHASHED = ("output_dir",)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "fedadg"
    reference: str = "adaptive"
    laplace_scale: float = 1.0 / math.sqrt(2.0)
    fixed_ref_class_offsets: bool = False

    suite: str = "rotated_two_moons"
    domain_params: list[float] = field(default_factory=lambda: [0.0, 15.0, 30.0, 45.0])
    targets: list[int] | None = None
    samples_per_domain: int = 500
    data_noise: float = 0.1
    num_classes: int = 2
    input_dim: int = 2

    rounds: int = 30
    E0: int = 2
    E1: int = 5
    batch_size: int = 32
    lr: float = 0.02
    adv_lr_ratio: float = 0.7
    lambda0: float = 0.85
    lambda1: float = 0.15
    epsilon: float = 0.1

    feature_dim: int = 32
    rp_dim: int = 16
    noise_dim: int = 16
    extractor_hidden: list[int] = field(default_factory=lambda: [64])
    classifier_hidden: list[int] = field(default_factory=list)

    weighted_aggregation: bool = False
    history_limit: int = 1000
    track_alignment: bool = True
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"reference must be one of {REFERENCES}, got {self.reference!r}")
        if self.mode == "fixed_ref" and self.reference == "adaptive":
            raise ConfigError("mode fixed_ref needs a fixed reference (gaussian, uniform or laplace)")
        if self.mode != "fixed_ref" and self.reference != "adaptive":
            raise ConfigError(f"reference {self.reference!r} is only valid with mode fixed_ref")
        if self.suite not in SUITES:
            raise ConfigError(f"suite must be one of {SUITES}, got {self.suite!r}")
        if len(self.domain_params) < 3:
            raise ConfigError("need at least 3 domains (2 sources + 1 target)")
        if self.targets is not None:
            for t in self.targets:
                if not 0 <= t < len(self.domain_params):
                    raise ConfigError(f"target index {t} out of range")
        if self.suite == "rotated_two_moons" and (self.num_classes, self.input_dim) != (2, 2):
            raise ConfigError("rotated_two_moons requires num_classes=2 and input_dim=2")
        for name in ("rounds", "E0", "E1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "feature_dim", "noise_dim", "samples_per_domain", "history_limit"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rp_dim < 1:
            raise ConfigError("rp_dim must be >= 1")
        if self.lr < 0 or self.adv_lr_ratio < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ConfigError("lambda0 and lambda1 must be non-negative")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must be in [0, 1)")
        if self.laplace_scale <= 0:
            raise ConfigError("laplace_scale must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    # derived switches
    @property
    def adversarial(self) -> bool:
        return self.mode != "fedavg"

    @property
    def conditional(self) -> bool:
        return self.mode != "no_onehot"

    @property
    def adaptive_reference(self) -> bool:
        return self.adversarial and self.mode != "fixed_ref"

    @property
    def effective_rp_dim(self) -> int:
        return self.feature_dim if self.mode == "no_rp" else self.rp_dim

    @property
    def lr_adv(self) -> float:
        return self.lr * self.adv_lr_ratio

    @property
    def target_indices(self) -> list[int]:
        return list(range(len(self.domain_params))) if self.targets is None else list(self.targets)

    @property
    def num_sources(self) -> int:
        return len(self.domain_params) - 1

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        for k in _UNHASHED:
            d.pop(k)
        return config_hash(d)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        coerced = {k: coerce(k, v) for k, v in data.items()}
        return cls(**coerced)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, value: Any) -> Any:
    """Convert a YAML/CLI value into the field's declared type."""
    kind = _FIELD_TYPES[key]
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{key} may not be null")
    try:
        if kind.startswith("list[") and isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        if kind.startswith("list[float]"):
            return [float(v) for v in value]
        if kind.startswith("list[int]"):
            return [int(v) for v in value]
        if kind == "bool":
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if key in data:
            log.info("override %s: %r -> %r", key, data[key], value)
        else:
            log.info("override %s = %r", key, value)
        data[key] = value
    return ExperimentConfig.from_dict(data)
