"""3D encoder, decoder with a voxel-shuffle super-resolution tail, and the
volume / slice discriminators.

All activations are smooth (SiLU) so the blocks can be checked against
central finite differences.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def _log2(f: int) -> int:
    n = int(round(math.log2(f)))
    if f < 2 or 2 ** n != f:
        raise ValueError(f"downsample factor must be a power of two >= 2, got {f}")
    return n


def voxel_shuffle(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    """(B, C*r^3, h, w, d) -> (B, C, h*r, w*r, d*r)."""
    b, c, h, w, d = x.shape
    if c % (r ** 3):
        raise ValueError(f"channels {c} not divisible by {r}^3")
    oc = c // r ** 3
    x = x.reshape(b, oc, r, r, r, h, w, d)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(b, oc, h * r, w * r, d * r)


class Encoder(nn.Module):
    def __init__(self, in_channels: int = 1, base: int = 16, n_z: int = 8, factor: int = 4):
        super().__init__()
        self.factor = factor
        layers = [nn.Conv3d(in_channels, base, 3, padding=1), nn.SiLU()]
        ch = base
        for _ in range(_log2(factor)):
            layers += [nn.Conv3d(ch, ch * 2, 3, stride=2, padding=1), nn.SiLU()]
            ch *= 2
        layers += [nn.Conv3d(ch, n_z, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if any(s % self.factor for s in x.shape[2:]):
            raise ValueError(f"volume dims {tuple(x.shape[2:])} not divisible by factor {self.factor}")
        return self.net(x)


class Decoder(nn.Module):
    """Latent -> volume. All but the last x2 upsampling is nearest + conv;
    the last x2 is the super-resolution tail (conv, voxel shuffle, conv)."""

    def __init__(self, out_channels: int = 1, base: int = 16, n_z: int = 8, factor: int = 4,
                 sr_channels: int = 8):
        super().__init__()
        self.n_z = n_z
        ch = base * factor // 2
        self.stem = nn.Sequential(nn.Conv3d(n_z, ch, 3, padding=1), nn.SiLU())
        ups = []
        for _ in range(_log2(factor) - 1):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(ch, ch // 2, 3, padding=1), nn.SiLU()]
            ch //= 2
        self.up = nn.Sequential(*ups)
        self.sr_expand = nn.Conv3d(ch, sr_channels * 8, 3, padding=1)
        self.sr_out = nn.Conv3d(sr_channels, out_channels, 3, padding=1)

    def forward(self, zq, clamp: bool = True):
        if zq.shape[1] != self.n_z:
            raise ValueError(f"latent has {zq.shape[1]} channels, decoder expects {self.n_z}")
        h = self.up(self.stem(zq))
        h = F.silu(voxel_shuffle(self.sr_expand(h), 2))
        out = self.sr_out(h)
        return out.clamp(-1.0, 1.0) if clamp else out


class VolumeDiscriminator(nn.Module):
    """D_3d: strided 3D convs, spatially averaged logit."""

    def __init__(self, in_channels: int = 1, base: int = 8, n_layers: int = 2):
        super().__init__()
        layers, ch = [], in_channels
        for i in range(n_layers):
            layers += [nn.Conv3d(ch, base * 2 ** i, 4, stride=2, padding=1), nn.SiLU()]
            ch = base * 2 ** i
        layers.append(nn.Conv3d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).mean(dim=(1, 2, 3, 4))


class SliceDiscriminator(nn.Module):
    """D_2d on single coronal slices (B, 1, H, W)."""

    def __init__(self, in_channels: int = 1, base: int = 8, n_layers: int = 2):
        super().__init__()
        layers, ch = [], in_channels
        for i in range(n_layers):
            layers += [nn.Conv2d(ch, base * 2 ** i, 4, stride=2, padding=1), nn.SiLU()]
            ch = base * 2 ** i
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).mean(dim=(1, 2, 3))
