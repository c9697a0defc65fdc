"""Latent diffusion: noise schedule, in-plane UNet denoiser, samplers, training."""

from .sampler import MODES, dm_loss, sample, timesteps
from .schedule import NoiseSchedule, make_schedule, q_sample
from .train import (DiffusionConfig, dm_checkpoint, latent_targets, load_denoiser, snap_latent,
                    train_diffusion)
from .unet import CrossAttention, InPlaneUNet, UNetConfig, timestep_embedding

__all__ = [
    "MODES", "dm_loss", "sample", "timesteps", "NoiseSchedule", "make_schedule", "q_sample",
    "DiffusionConfig", "dm_checkpoint", "latent_targets", "load_denoiser", "snap_latent", "train_diffusion",
    "CrossAttention", "InPlaneUNet", "UNetConfig", "timestep_embedding",
]
