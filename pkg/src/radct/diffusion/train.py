"""Training loop and checkpoints for the prior-conditioned latent denoiser."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from ..checkpoint import (Checkpoint, module_tensors, optimizer_tensors, restore_optimizer, restore_rng,
                          rng_bytes)
from ..vq.quantizer import lookup, nearest_indices, to_sites, zscore
from ..vq.train import check_finite
from .sampler import MODES, dm_loss
from .schedule import make_schedule
from .unet import InPlaneUNet, UNetConfig

log = logging.getLogger(__name__)


@dataclass
class DiffusionConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 2e-3
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    log_every: int = 10
    sample_mode: str = "ddpm"
    sample_steps: int = 50
    n_samples: int = 4  # reconstructions average this many decoded samples

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if self.sample_mode not in MODES:
            raise ValueError(f"sample_mode must be one of {MODES}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.sample_steps > self.T:
            raise ValueError(f"sample_steps ({self.sample_steps}) exceed T ({self.T})")

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["unet"] = self.unet.to_dict()
        return out


def latent_targets(compressor, volumes) -> tuple[torch.Tensor, float]:
    """Quantized compressor latents used as diffusion data, plus their scale.

    In normalized lookup mode the latents are the z-scored codebook entries
    the decoder consumes (unit variance per site, scale 1). In raw mode the
    selected entries are multiplied by 1/std over the whole set.
    """
    mode = compressor.config.lookup_mode
    data = torch.from_numpy(np.stack([np.asarray(getattr(v, "values", v), dtype=np.float32)
                                      for v in volumes]))[:, None]
    with torch.no_grad():
        out = []
        for i in range(len(data)):
            z = compressor.encoder(data[i:i + 1])
            idx = nearest_indices(to_sites(z), compressor.codebook.entries, mode).reshape(1, *z.shape[2:])
            out.append(lookup(idx, compressor.codebook, mode))
        latents = torch.cat(out)
    scale = 1.0 if mode == "normalized" else float(1.0 / max(latents.std().item(), 1e-12))
    return latents * scale, scale


def snap_latent(x: torch.Tensor, scale: float, entries: torch.Tensor, lookup_mode: str):
    """Undo the data scale and snap every site to the nearest codebook entry.

    Returns ``(latent the decoder consumes, indices)``.
    """
    z = (x / scale).to(torch.float32)
    idx = nearest_indices(to_sites(z), entries, lookup_mode)
    b, _, h, w, d = z.shape
    idx = idx.reshape(b, h, w, d)
    picked = entries[idx.reshape(-1)]
    if lookup_mode == "normalized":
        picked = zscore(picked)
    return picked.reshape(b, h, w, d, -1).permute(0, 4, 1, 2, 3), idx


def dm_checkpoint(model: InPlaneUNet, config: DiffusionConfig, opt, gen, iteration: int, latent_scale: float,
                  extra: dict | None = None) -> Checkpoint:
    tensors = module_tensors("model", model)
    t_opt, groups = optimizer_tensors("optim", opt)
    tensors.update(t_opt)
    meta = {"stage": "dm", "config": config.to_dict(), "schedule": config.schedule().to_dict(),
            "latent_scale": latent_scale, "optim": groups, **(extra or {})}
    return Checkpoint(tensors, meta, iteration, None, None, rng_bytes(gen))


def load_denoiser(ckpt: Checkpoint) -> tuple[InPlaneUNet, DiffusionConfig, float]:
    if ckpt.meta.get("stage") != "dm":
        raise ValueError(f"not a diffusion checkpoint (stage={ckpt.meta.get('stage')!r})")
    config = DiffusionConfig(**ckpt.meta["config"])
    model = InPlaneUNet(config.unet)
    model.load_state_dict(ckpt.module_state("model"))
    return model, config, float(ckpt.meta["latent_scale"])


def train_diffusion(latents: torch.Tensor, tokens: torch.Tensor, config: DiffusionConfig, latent_scale: float = 1.0,
                    resume: Checkpoint | None = None, log_path=None, extra_meta: dict | None = None):
    """Minimise the noise-prediction loss on (latent, prior tokens) pairs.

    ``latents`` are (N, n_z, h, w, d) and ``tokens`` (N, h*w*d, n_z).
    Returns ``(model, checkpoint, history)``.
    """
    if len(latents) != len(tokens) or len(latents) == 0:
        raise ValueError("need a non-empty set of (latent, tokens) pairs")
    if tuple(latents.shape[1:]) != (config.unet.n_z, *config.unet.latent_dims):
        raise ValueError(f"latent shape {tuple(latents.shape[1:])} does not match the denoiser config")
    torch.set_num_threads(1)
    latents, tokens = latents.float(), tokens.float()
    sched = config.schedule()
    gen = torch.Generator().manual_seed(config.seed)
    model = InPlaneUNet(config.unet, generator=gen)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.module_state("model"))
        restore_optimizer(opt, "optim", resume, resume.meta["optim"])
        restore_rng(gen, resume.rng_state)
        start = resume.iteration

    history = []
    fh = open(log_path, "a" if resume else "w", newline="") if log_path else None
    writer = csv.DictWriter(fh, fieldnames=["step", "loss"], lineterminator="\n") if fh else None
    if writer and not resume:
        writer.writeheader()
    try:
        for step in range(start, config.steps):
            idx = torch.randint(len(latents), (config.batch_size,), generator=gen)
            loss = dm_loss(latents[idx], tokens[idx], sched, model, gen)
            check_finite("dm", step, {"loss": loss})
            opt.zero_grad()
            loss.backward()
            opt.step()
            if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
                row = {"step": step + 1, "loss": float(loss.detach())}
                history.append(row)
                if writer:
                    writer.writerow({"step": row["step"], "loss": f"{row['loss']:.8g}"})
                log.info("dm step %d loss=%.4f", step + 1, row["loss"])
    finally:
        if fh:
            fh.close()
    return model, dm_checkpoint(model, config, opt, gen, config.steps, latent_scale, extra_meta), history
