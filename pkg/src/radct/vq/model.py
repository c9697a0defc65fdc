"""The perceptual compression model and its numpy-facing API."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..nn_init import seeded_init
from ..volume import Unit, Volume
from .losses import VqLossWeights
from .networks import Decoder, Encoder, SliceDiscriminator, VolumeDiscriminator
from .quantizer import Codebook, LOOKUP_MODES, lookup, quantize as _quantize


@dataclass
class CompressorConfig:
    dims: tuple = (32, 32, 32)
    base_channels: int = 16
    n_z: int = 8
    codebook_size: int = 512
    codebook_init: Optional[float] = None  # uniform(-s, s); None means 1/n
    factor: int = 4
    sr_channels: int = 8
    disc_channels: int = 8
    lookup_mode: str = "normalized"
    homogeneous: bool = True
    weights: VqLossWeights = field(default_factory=VqLossWeights)
    lr: float = 2e-4
    disc_lr: float = 2e-4
    steps: int = 500
    batch_size: int = 1
    gan_warmup: float = 0.25
    seed: int = 0
    perceptual_seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = VqLossWeights(**self.weights)
        self.dims = tuple(self.dims)
        if self.lookup_mode not in LOOKUP_MODES:
            raise ValueError(f"lookup_mode must be one of {LOOKUP_MODES}")
        if any(d % self.factor for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by factor {self.factor}")

    @property
    def latent_dims(self) -> tuple:
        return tuple(d // self.factor for d in self.dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class LatentGrid:
    """Latent volume stored site-last: ``values`` has shape (h, w, d, n_z)."""

    values: np.ndarray
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ValueError("latent values must have shape (h, w, d, n_z)")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if self.indices.shape != self.values.shape[:3]:
                raise ValueError("indices must have shape (h, w, d)")

    @property
    def dims(self) -> tuple:
        return tuple(self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def quantized(self) -> bool:
        return self.indices is not None

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.values)).to(dtype).permute(3, 0, 1, 2)[None]

    @classmethod
    def from_tensor(cls, z: torch.Tensor, indices: torch.Tensor | None = None) -> "LatentGrid":
        vals = z.detach()[0].permute(1, 2, 3, 0).cpu().numpy()
        idx = None if indices is None else indices.detach()[0].cpu().numpy()
        return cls(vals, idx)


class Compressor(nn.Module):
    def __init__(self, config: CompressorConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.config = c = config or CompressorConfig()
        self.encoder = Encoder(1, c.base_channels, c.n_z, c.factor)
        self.decoder = Decoder(1, c.base_channels, c.n_z, c.factor, c.sr_channels)
        self.codebook = Codebook(c.codebook_size, c.n_z, generator=generator, init_scale=c.codebook_init)
        self.d3d = VolumeDiscriminator(1, c.disc_channels)
        self.d2d = SliceDiscriminator(1, c.disc_channels)
        if generator is not None:
            seeded_init(self, generator)

    def generator_parameters(self):
        return [*self.encoder.parameters(), *self.decoder.parameters(), *self.codebook.parameters()]

    def discriminator_parameters(self):
        return [*self.d3d.parameters(), *self.d2d.parameters()]

    def quantize(self, z, update_usage: bool = True):
        return _quantize(z, self.codebook, self.config.lookup_mode, self.config.homogeneous, update_usage)

    def forward(self, x, update_usage: bool = True):
        z = self.encoder(x)
        q = self.quantize(z, update_usage)
        return self.decoder(q.zq), z, q


def _volume_tensor(v: Volume) -> torch.Tensor:
    if v.unit is not Unit.NORMALIZED:
        raise ValueError(f"compressor expects a normalized volume, got {v.unit.name}")
    return torch.from_numpy(np.ascontiguousarray(v.values, dtype=np.float32))[None, None]


def encode(v: Volume, model: Compressor) -> LatentGrid:
    """Continuous latent of a normalized volume."""
    with torch.no_grad():
        return LatentGrid.from_tensor(model.encoder(_volume_tensor(v)))


def quantize(z: LatentGrid, model: Compressor, lookup_mode: str | None = None,
             update_usage: bool = True) -> tuple[LatentGrid, float]:
    """Quantize a continuous latent; returns the quantized grid and its VQ loss."""
    if z.quantized:
        raise ValueError("latent is already quantized")
    mode = lookup_mode or model.config.lookup_mode
    with torch.no_grad():
        q = _quantize(z.tensor(), model.codebook, mode, model.config.homogeneous, update_usage)
        zq = lookup(q.indices, model.codebook, mode)
    return LatentGrid.from_tensor(zq, q.indices), float(q.loss)


def decode(zq: LatentGrid, model: Compressor, spacing=(10.0, 10.0, 10.0)) -> Volume:
    """Decode a quantized latent to a normalized volume clamped to [-1, 1]."""
    if not zq.quantized:
        raise ValueError("decode expects a quantized latent")
    with torch.no_grad():
        out = model.decoder(zq.tensor())
    return Volume(out[0, 0].numpy().astype(np.float32), spacing, Unit.NORMALIZED)
