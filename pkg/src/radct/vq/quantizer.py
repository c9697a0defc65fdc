"""Nearest-neighbour vector quantisation with a homogeneous (z-scored) loss.

Latents are channel-first torch tensors ``(B, n_z, h, w, d)``. A site is one
``n_z`` vector at a spatial position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

ZSCORE_EPS = 1e-6
LOOKUP_MODES = ("raw", "normalized")


def zscore(t: torch.Tensor, dim: int = -1, eps: float = ZSCORE_EPS) -> torch.Tensor:
    """Per-vector z-score along ``dim`` using the population std.

    Vectors with std below ``eps`` map to zero instead of blowing up.
    """
    mean = t.mean(dim=dim, keepdim=True)
    centered = t - mean
    var = (centered * centered).mean(dim=dim, keepdim=True)
    flat = var < eps * eps
    std = torch.sqrt(torch.where(flat, torch.ones_like(var), var))
    return torch.where(flat, torch.zeros_like(centered), centered / (std + eps))


def zscore_normalize(v) -> np.ndarray:
    """NumPy front end of :func:`zscore` for a single vector (len >= 2)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("zscore_normalize needs a vector of length >= 2")
    return zscore(torch.from_numpy(v)).numpy()


class Codebook(nn.Module):
    """``n`` learnable entries of dimension ``n_z`` plus per-entry usage counters."""

    def __init__(self, n: int = 8192, n_z: int = 8, generator: torch.Generator | None = None,
                 init_scale: float | None = None):
        super().__init__()
        if n <= 0 or n_z <= 0:
            raise ValueError("codebook needs n > 0 and n_z > 0")
        scale = 1.0 / n if init_scale is None else init_scale
        init = (torch.rand(n, n_z, generator=generator) * 2.0 - 1.0) * scale
        self.entries = nn.Parameter(init)
        self.register_buffer("usage_counts", torch.zeros(n, dtype=torch.int64))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def n_z(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self) -> None:
        self.usage_counts.zero_()

    def usage(self) -> float:
        return codebook_usage(self.usage_counts)


def codebook_usage(counts) -> float:
    """Fraction of entries selected at least once."""
    counts = torch.as_tensor(counts)
    if counts.numel() == 0:
        return 0.0
    return float((counts > 0).sum().item()) / counts.numel()


def nearest_indices(flat: torch.Tensor, entries: torch.Tensor, lookup_mode: str = "raw",
                    chunk: int = 1024) -> torch.Tensor:
    """Exact argmin of squared distance per row; ties go to the lowest index."""
    if lookup_mode not in LOOKUP_MODES:
        raise ValueError(f"lookup_mode must be one of {LOOKUP_MODES}")
    with torch.no_grad():
        if lookup_mode == "normalized":
            flat, entries = zscore(flat), zscore(entries)
        out = torch.empty(flat.shape[0], dtype=torch.int64)
        for s in range(0, flat.shape[0], chunk):
            diff = flat[s:s + chunk, None, :] - entries[None, :, :]
            out[s:s + chunk] = (diff * diff).sum(-1).argmin(dim=1)
    return out


def to_sites(z: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w, d) -> (B*h*w*d, C)."""
    return z.permute(0, 2, 3, 4, 1).reshape(-1, z.shape[1])


def from_sites(flat: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    b, c, h, w, d = like.shape
    return flat.reshape(b, h, w, d, c).permute(0, 4, 1, 2, 3)


def vq_loss(z: torch.Tensor, zq: torch.Tensor, homogeneous: bool = True) -> torch.Tensor:
    """Codebook + commitment loss, summed over channels and averaged over sites.

    ``z`` and ``zq`` are site matrices ``(N, n_z)``; ``zq`` holds raw codebook
    entries (not the straight-through tensor).
    """
    norm = zscore if homogeneous else (lambda t: t)
    codebook_term = (norm(z.detach()) - norm(zq)).pow(2).sum(-1)
    commit_term = (norm(zq.detach()) - norm(z)).pow(2).sum(-1)
    return (codebook_term + commit_term).mean()


@dataclass
class Quantized:
    zq: torch.Tensor  # straight-through tensor, same shape as z
    indices: torch.Tensor  # (B, h, w, d)
    loss: torch.Tensor


def quantize(z: torch.Tensor, codebook: Codebook, lookup_mode: str = "raw", homogeneous: bool = True,
             update_usage: bool = True) -> Quantized:
    """Snap every site of ``z`` to its nearest codebook entry.

    In ``raw`` mode the forward value is the selected entry and gradients
    pass straight through to ``z``. In ``normalized`` mode both sides live
    in the z-scored space: the forward value is N(entry) and gradients pass
    straight through to N(z).
    """
    if codebook.n == 0:
        raise ValueError("empty codebook")
    if z.shape[1] != codebook.n_z:
        raise ValueError(f"latent has {z.shape[1]} channels, codebook expects {codebook.n_z}")
    flat = to_sites(z)
    idx = nearest_indices(flat, codebook.entries, lookup_mode)
    picked = codebook.entries[idx]
    loss = vq_loss(flat, picked, homogeneous)
    if update_usage:
        codebook.usage_counts += torch.bincount(idx, minlength=codebook.n)
    if lookup_mode == "normalized":
        flat, picked = zscore(flat), zscore(picked)
    zq = flat + (picked - flat).detach()
    b, _, h, w, d = z.shape
    return Quantized(from_sites(zq, z), idx.reshape(b, h, w, d), loss)


def lookup(indices: torch.Tensor, codebook: Codebook, lookup_mode: str = "raw") -> torch.Tensor:
    """Indices (B, h, w, d) -> channel-first latent of codebook entries.

    ``normalized`` mode returns z-scored entries, the vectors the decoder sees.
    """
    b, h, w, d = indices.shape
    flat = codebook.entries[indices.reshape(-1)]
    if lookup_mode == "normalized":
        flat = zscore(flat)
    return flat.reshape(b, h, w, d, -1).permute(0, 4, 1, 2, 3)
