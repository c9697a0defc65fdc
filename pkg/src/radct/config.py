"""Declarative pipeline configuration (JSON) with dotted-path overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .diffusion.train import DiffusionConfig
from .prior import PriorConfig
from .projector import ProjectorConfig
from .vq.model import CompressorConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_phantoms: int = 20
    train_fraction: float = 0.9
    dims: tuple = (32, 32, 32)
    spacing: tuple = (10.0, 10.0, 10.0)
    seed: int = 1000  # phantom i uses seed + i

    def __post_init__(self):
        self.dims, self.spacing = tuple(self.dims), tuple(float(s) for s in self.spacing)
        if self.n_phantoms < 2:
            raise ConfigError("need at least 2 phantoms")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")

    @property
    def n_train(self) -> int:
        n = int(round(self.n_phantoms * self.train_fraction))
        return min(max(n, 1), self.n_phantoms - 1)


_SECTIONS = {"data": DataConfig, "projector": ProjectorConfig, "vq": CompressorConfig,
             "prior": PriorConfig, "dm": DiffusionConfig}


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    vq: CompressorConfig = field(default_factory=CompressorConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    dm: DiffusionConfig = field(default_factory=DiffusionConfig)

    def check(self) -> "PipelineConfig":
        """Cross-section consistency: every stage must agree on the geometry."""
        lat = self.vq.latent_dims
        if tuple(self.vq.dims) != tuple(self.data.dims):
            raise ConfigError(f"vq.dims {self.vq.dims} != data.dims {self.data.dims}")
        if tuple(self.prior.image_dims) != tuple(self.data.dims[:2]):
            raise ConfigError(f"prior.image_dims {self.prior.image_dims} != data.dims[:2]")
        if tuple(self.prior.latent_dims) != lat or tuple(self.dm.unet.latent_dims) != lat:
            raise ConfigError(f"prior/dm latent dims must equal the compressor's {lat}")
        if not self.vq.n_z == self.prior.n_z == self.dm.unet.n_z:
            raise ConfigError("n_z must agree across vq, prior and dm")
        return self

    def to_dict(self) -> dict:
        return {
            "data": {**asdict(self.data), "dims": list(self.data.dims), "spacing": list(self.data.spacing)},
            "projector": asdict(self.projector),
            "vq": self.vq.to_dict(),
            "prior": self.prior.to_dict(),
            "dm": self.dm.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(**{k: _SECTIONS[k](**v) for k, v in d.items()}).check()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value``; the value is JSON if it parses, else a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# Paper-scale settings; documented for reference, far beyond a CPU budget.
PAPER_OVERRIDES = {
    "data.n_phantoms": 1018, "data.dims": [128, 128, 128], "data.spacing": [2.5, 2.5, 2.5],
    "vq.dims": [128, 128, 128], "vq.codebook_size": 8192, "vq.steps": 80000, "vq.lr": 2e-4, "vq.batch_size": 1,
    "prior.image_dims": [128, 128], "prior.latent_dims": [32, 32, 32], "prior.steps": 50000,
    "prior.batch_size": 16, "prior.lr": 1e-4,
    "dm.unet.latent_dims": [32, 32, 32], "dm.T": 1000, "dm.steps": 100000, "dm.batch_size": 8, "dm.lr": 1e-4,
}

PROFILES = {"desk": {}, "paper": PAPER_OVERRIDES}


def build_config(path=None, profile: str = "desk", overrides=()) -> PipelineConfig:
    """Defaults, then the profile, then the file, then ``--set`` overrides (flags win)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    d = PipelineConfig().to_dict()
    for key, value in PROFILES[profile].items():
        _set_path(d, key, value)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(d, loaded)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(d, key, value)
    return PipelineConfig.from_dict(copy.deepcopy(d))


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(v, dict) and isinstance(base[k], dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v
