"""Experiment configuration: a single JSON file driving data generation,
training and evaluation.

Schema (all keys optional, defaults shown by ``default_config``):

    {
      "seed": 0,
      "network":    {NetworkConfig fields},
      "federation": {FederationConfig fields},
      "loss":       {LossConfig fields},
      "data": {
        "num_samples": 24, "full_client_samples": 120,
        "image_size": [64, 64], "noise_sigma": 0.12,
        "shift_range": [-0.12, 0.12], "oof_shift": 0.22
      }
    }

Cross-references are validated: the organ count must agree between network
and federation, and the federation's client count drives the benchmark.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .federation import FederationConfig
from .losses import LossConfig
from .network import NetworkConfig


class ConfigError(ValueError):
    """The experiment configuration is invalid or inconsistent."""


@dataclass(frozen=True)
class DataConfig:
    num_samples: int = 24
    full_client_samples: int = 120
    image_size: tuple = (64, 64)
    noise_sigma: float = 0.12
    shift_range: tuple = (-0.12, 0.12)
    oof_shift: float = 0.22


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    network: NetworkConfig = NetworkConfig()
    federation: FederationConfig = FederationConfig()
    loss: LossConfig = LossConfig()
    data: DataConfig = DataConfig()

    def __post_init__(self):
        if self.network.num_organs != self.federation.num_organs:
            raise ConfigError(
                f"organ count mismatch: network {self.network.num_organs}, "
                f"federation {self.federation.num_organs}")
        div = 2 ** (self.network.levels - 1)
        h, w = self.data.image_size
        if h % div or w % div:
            raise ConfigError(
                f"image size {h}x{w} not divisible by 2^(levels-1) = {div}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "network": dataclasses.asdict(self.network),
            "federation": dataclasses.asdict(self.federation),
            "loss": dataclasses.asdict(self.loss),
            "data": dataclasses.asdict(self.data),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _build(cls, payload: dict, section: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - valid
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    coerced = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except Exception as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def from_dict(payload: dict) -> ExperimentConfig:
    known = {"seed", "network", "federation", "loss", "data"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(payload.get("seed", 0))
    fed_payload = dict(payload.get("federation", {}))
    fed_payload.setdefault("seed", seed)
    return ExperimentConfig(
        seed=seed,
        network=_build(NetworkConfig, payload.get("network", {}), "network"),
        federation=_build(FederationConfig, fed_payload, "federation"),
        loss=_build(LossConfig, payload.get("loss", {}), "loss"),
        data=_build(DataConfig, payload.get("data", {}), "data"),
    )


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return from_dict(payload)


def save(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, default=list) + "\n")


def default_config(seed: int = 0) -> ExperimentConfig:
    return from_dict({"seed": seed})
