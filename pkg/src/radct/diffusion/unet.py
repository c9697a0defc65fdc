"""Noise-prediction UNet with in-plane (3x3x1) convolutions.

Depth (the third spatial axis) is never convolved or resampled; information
moves along it only through cross-attention onto the prior tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn
import torch.nn.functional as F

from ..nn_init import seeded_init

K = (3, 3, 1)
P = (1, 1, 0)


@dataclass
class UNetConfig:
    latent_dims: tuple = (8, 8, 8)
    n_z: int = 8
    base: int = 32
    mults: tuple = (1, 2)
    attn_levels: int = 2  # attention at this many lowest-resolution levels
    heads: int = 2
    head_dim: int = 16
    time_dim: int = 64
    groups: int = 8
    pos_dim: int = 8  # positional embedding width (>= 5)
    pos_temperature: float = 16.0  # initial locality of the positional attention term

    def __post_init__(self):
        self.latent_dims = tuple(self.latent_dims)
        self.mults = tuple(self.mults)
        h, w, _ = self.latent_dims
        down = 2 ** (len(self.mults) - 1)
        if h % down or w % down:
            raise ValueError(f"in-plane latent dims {(h, w)} not divisible by {down}")
        if self.pos_dim < 5:
            raise ValueError("pos_dim must be at least 5")
        for m in self.mults:
            if (self.base * m) % self.groups:
                raise ValueError("channel counts must be divisible by the group count")

    @property
    def n_tokens(self) -> int:
        h, w, d = self.latent_dims
        return h * w * d

    def level_dims(self, level: int) -> tuple:
        h, w, d = self.latent_dims
        return (h >> level, w >> level, d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["latent_dims"], out["mults"] = list(self.latent_dims), list(self.mults)
        return out


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv3d(c_in, c_out, K, padding=P)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, K, padding=P)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def grid_coords(latent_dims, level: int = 0) -> torch.Tensor:
    """Centred latent-voxel coordinates of a level's sites, i fastest (token order).

    A site at level ``l`` covers a 2^l x 2^l in-plane block; its coordinate
    is the block centre.
    """
    h, w, d = latent_dims
    s = 2 ** level
    i = (torch.arange(h >> level, dtype=torch.float64) + 0.5) * s - 0.5 - (h - 1) / 2
    j = (torch.arange(w >> level, dtype=torch.float64) + 0.5) * s - 0.5 - (w - 1) / 2
    k = torch.arange(d, dtype=torch.float64) - (d - 1) / 2
    kk, jj, ii = torch.meshgrid(k, j, i, indexing="ij")
    return torch.stack([ii, jj, kk], dim=-1).reshape(-1, 3)


def locality_embedding(coords: torch.Tensor, dim: int, temperature: float, role: str,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Embeddings whose query . key products equal -temperature * |c_q - c_k|^2 / 2.

    Queries use ``[c, 1, -|c|^2/2]`` and keys ``[c, -|c|^2/2, 1]``, both
    scaled by sqrt(temperature); the remaining ``dim - 5`` columns get small
    seeded noise (zeros without a generator) so they can learn.
    """
    sq = -(coords * coords).sum(-1, keepdim=True) / 2
    one = torch.ones_like(sq)
    core = torch.cat([coords, one, sq] if role == "query" else [coords, sq, one], dim=-1)
    tail = torch.zeros(len(coords), dim - 5, dtype=torch.float64)
    if generator is not None:
        tail = torch.randn(tail.shape, generator=generator, dtype=torch.float64) * 0.01
    return (torch.cat([core * math.sqrt(temperature), tail], dim=-1)).float()


class CrossAttention(nn.Module):
    """Queries from UNet features, keys and values from the prior tokens.

    The attention logit of query ``q`` and token ``t`` is the usual scaled
    dot product plus a positional term ``query_pos[q] . token_pos[t]``, both
    learned embeddings in a shared ``pos_dim`` space.
    """

    def __init__(self, channels: int, n_queries: int, token_dim: int, heads: int, head_dim: int, groups: int,
                 pos_dim: int = 8):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.norm = nn.GroupNorm(groups, channels)
        self.query_pos = nn.Parameter(torch.zeros(n_queries, pos_dim))
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(token_dim, inner, bias=False)
        self.to_v = nn.Linear(token_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)
        self.last_attn = None

    def forward(self, x, context, context_pos):
        b, c, h, w, d = x.shape
        q_in = self.norm(x).permute(0, 4, 3, 2, 1).reshape(b, -1, c)
        q = self.to_q(q_in).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        pos = self.query_pos.to(x.dtype) @ context_pos.to(x.dtype).transpose(-1, -2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + pos.unsqueeze(-3)
        attn = torch.softmax(logits, dim=-1)
        self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, -1, self.heads * self.head_dim)
        out = self.to_out(out).reshape(b, d, w, h, c).permute(0, 4, 3, 2, 1)
        return x + out


class Level(nn.Module):
    def __init__(self, c_in, c_out, cfg: UNetConfig, level: int, attend: bool):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_dim, cfg.groups)
        h, w, d = cfg.level_dims(level)
        self.level = level
        self.attn = (CrossAttention(c_out, h * w * d, cfg.n_z, cfg.heads, cfg.head_dim, cfg.groups, cfg.pos_dim)
                     if attend else None)

    def forward(self, x, temb, context, context_pos):
        x = self.res(x, temb)
        return self.attn(x, context, context_pos) if self.attn is not None else x


class InPlaneUNet(nn.Module):
    def __init__(self, config: UNetConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.config = cfg = config or UNetConfig()
        n_levels = len(cfg.mults)
        attend = [lvl >= n_levels - cfg.attn_levels for lvl in range(n_levels)]
        chans = [cfg.base * m for m in cfg.mults]
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
                                      nn.Linear(cfg.time_dim, cfg.time_dim))
        self.token_pos = nn.Parameter(torch.zeros(cfg.n_tokens, cfg.pos_dim))
        self.in_conv = nn.Conv3d(cfg.n_z, cfg.base, K, padding=P)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = cfg.base
        for lvl, co in enumerate(chans):
            self.down.append(Level(c, co, cfg, lvl, attend[lvl]))
            c = co
            if lvl < n_levels - 1:
                self.downsample.append(nn.Conv3d(c, c, K, stride=(2, 2, 1), padding=P))
        self.mid = Level(c, c, cfg, n_levels - 1, True)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(n_levels)):
            co = chans[lvl]
            self.up.append(Level(c + chans[lvl], co, cfg, lvl, attend[lvl]))
            c = co
            if lvl > 0:
                self.upsample.append(nn.Conv3d(c, c, K, padding=P))
        self.out_norm = nn.GroupNorm(cfg.groups, c)
        self.out_conv = nn.Conv3d(c, cfg.n_z, K, padding=P)
        if generator is not None:
            seeded_init(self, generator)
        self.reset_positions(generator)

    def reset_positions(self, generator: torch.Generator | None = None) -> None:
        """Locality-biased initial positional embeddings (see :func:`locality_embedding`)."""
        cfg = self.config
        with torch.no_grad():
            self.token_pos.copy_(locality_embedding(grid_coords(cfg.latent_dims), cfg.pos_dim,
                                                    cfg.pos_temperature, "key", generator))
            for lvl_block in [*self.down, self.mid, *self.up]:
                if lvl_block.attn is not None:
                    coords = grid_coords(cfg.latent_dims, lvl_block.level)
                    lvl_block.attn.query_pos.copy_(locality_embedding(coords, cfg.pos_dim, cfg.pos_temperature,
                                                                      "query", generator))

    def attention_blocks(self) -> list[CrossAttention]:
        return [m for m in self.modules() if isinstance(m, CrossAttention)]

    def forward(self, x, t, tokens, token_pos: torch.Tensor | None = None):
        """Predict the noise in ``x`` (B, n_z, h, w, d) at 1-based steps ``t``.

        ``tokens`` are (B, n_tokens, n_z). ``token_pos`` (n_tokens, pos_dim)
        overrides the learned per-token positional embedding (same row order
        as ``tokens``).
        """
        cfg = self.config
        if tokens.shape[-1] != cfg.n_z:
            raise ValueError(f"token dim {tokens.shape[-1]} != attention input dim {cfg.n_z}")
        if tuple(x.shape[2:]) != cfg.latent_dims or x.shape[1] != cfg.n_z:
            raise ValueError(f"latent shape {tuple(x.shape[1:])} does not match the configured grid")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, cfg.time_dim).to(x.dtype))
        context = tokens.to(x.dtype)
        context_pos = self.token_pos if token_pos is None else token_pos
        h = self.in_conv(x)
        skips = []
        for lvl, block in enumerate(self.down):
            h = block(h, temb, context, context_pos)
            skips.append(h)
            if lvl < len(self.downsample):
                h = self.downsample[lvl](h)
        h = self.mid(h, temb, context, context_pos)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), temb, context, context_pos)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=(2, 2, 1), mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))
