"""Adversarial and composite autoencoder objectives."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch

from .quantizer import to_sites, vq_loss

LOG_CLAMP = 1e-7


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=LOG_CLAMP))


def coronal_slice(x: torch.Tensor, k: int) -> torch.Tensor:
    """(B, 1, H, W, D) -> (B, 1, H, W) at anterior-posterior index ``k``."""
    if not 0 <= k < x.shape[-1]:
        raise ValueError(f"slice index {k} outside [0, {x.shape[-1]})")
    return x[..., k]


def gan_loss(x, x_hat, k: int, d3d, d2d, alpha: float = 0.5, beta: float = 0.5) -> torch.Tensor:
    """Discriminator objective (to be maximised by D), averaged over the batch.

    alpha * [log D3(x) + log(1 - D3(x_hat))] + beta * [log D2(x_k) + log(1 - D2(x_hat_k))]
    """
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat must have the same shape")
    xk, xk_hat = coronal_slice(x, k), coronal_slice(x_hat, k)
    total = x.new_zeros(())
    if alpha:
        total = total + alpha * (_log(torch.sigmoid(d3d(x))) + _log(1 - torch.sigmoid(d3d(x_hat)))).mean()
    if beta:
        total = total + beta * (_log(torch.sigmoid(d2d(xk))) + _log(1 - torch.sigmoid(d2d(xk_hat)))).mean()
    return total


def generator_adv_loss(x_hat, k: int, d3d, d2d, alpha: float = 0.5, beta: float = 0.5) -> torch.Tensor:
    """Non-saturating generator term: -alpha log D3(x_hat) - beta log D2(x_hat_k)."""
    total = x_hat.new_zeros(())
    if alpha:
        total = total - alpha * _log(torch.sigmoid(d3d(x_hat))).mean()
    if beta:
        total = total - beta * _log(torch.sigmoid(d2d(coronal_slice(x_hat, k)))).mean()
    return total


@dataclass
class VqLossWeights:
    rec: float = 1.0
    lpips: float = 1.0
    vq: float = 0.1
    gan: float = 0.1
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


def vqgan_loss(x, x_hat, z, zq, weights: VqLossWeights, perceptual=None, adv_term=None,
               homogeneous: bool = True):
    """Weighted sum of L1 reconstruction, perceptual, VQ and adversarial terms.

    ``z`` is the encoder output and ``zq`` the selected codebook entries, both
    channel-first. Terms with zero weight are reported as 0 and not
    evaluated. Returns ``(total, terms)`` with scalar tensors.
    """
    zero = x.new_zeros(())
    terms = {
        "rec": (x - x_hat).abs().mean() if weights.rec else zero,
        "lpips": perceptual(x, x_hat).mean() if weights.lpips and perceptual is not None else zero,
        "vq": vq_loss(to_sites(z), to_sites(zq), homogeneous) if weights.vq else zero,
        "gan": adv_term if weights.gan and adv_term is not None else zero,
    }
    total = (weights.rec * terms["rec"] + weights.lpips * terms["lpips"]
             + weights.vq * terms["vq"] + weights.gan * terms["gan"])
    return total, terms
