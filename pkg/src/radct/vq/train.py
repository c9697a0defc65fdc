"""Stage-1 training loop for the compressor."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import (Checkpoint, module_tensors, optimizer_tensors, restore_optimizer, restore_rng,
                          rng_bytes)
from ..metrics import PerceptualSurrogate
from .losses import gan_loss, generator_adv_loss, vqgan_loss
from .model import Compressor, CompressorConfig
from .quantizer import lookup

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "rec", "lpips", "vq", "gan", "total", "disc", "usage", "slice")


class NumericalAbort(RuntimeError):
    """A loss term became NaN or infinite."""

    def __init__(self, stage: str, step: int, term: str):
        super().__init__(f"{stage}: loss term {term!r} is not finite at step {step}")
        self.stage, self.step, self.term = stage, step, term


def check_finite(stage: str, step: int, terms: dict) -> None:
    for name, value in terms.items():
        if not math.isfinite(float(value.detach() if isinstance(value, torch.Tensor) else value)):
            raise NumericalAbort(stage, step, name)


def _stack(volumes) -> torch.Tensor:
    arrs = [np.asarray(getattr(v, "values", v), dtype=np.float32) for v in volumes]
    return torch.from_numpy(np.stack(arrs))[:, None]


def compressor_checkpoint(model: Compressor, opt_g, opt_d, gen: torch.Generator, iteration: int) -> Checkpoint:
    tensors = module_tensors("model", model)
    t_g, groups_g = optimizer_tensors("optim.gen", opt_g)
    t_d, groups_d = optimizer_tensors("optim.disc", opt_d)
    tensors.update(t_g)
    tensors.update(t_d)
    meta = {"stage": "vq", "config": model.config.to_dict(),
            "optim": {"gen": groups_g, "disc": groups_d}}
    return Checkpoint(tensors, meta, iteration, model.codebook.entries.detach().numpy().copy(),
                      model.codebook.usage_counts.numpy().copy(), rng_bytes(gen))


def load_compressor(ckpt: Checkpoint) -> Compressor:
    if ckpt.meta.get("stage") != "vq":
        raise ValueError(f"not a compressor checkpoint (stage={ckpt.meta.get('stage')!r})")
    model = Compressor(CompressorConfig(**ckpt.meta["config"]))
    model.load_state_dict(ckpt.module_state("model"))
    return model


def _make_optimizers(model: Compressor, config: CompressorConfig):
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.disc_lr, betas=(0.5, 0.9))
    return opt_g, opt_d


def train_compressor(volumes, config: CompressorConfig, resume: Checkpoint | None = None,
                     log_path=None, steps: int | None = None):
    """Alternate generator / discriminator updates for ``config.steps`` iterations.

    ``volumes`` are normalized arrays (or Volumes) of shape ``config.dims``.
    ``steps`` optionally stops early at that iteration (used to produce a
    resumable intermediate checkpoint). Returns ``(model, checkpoint, history)``.
    """
    if len(volumes) < 2:
        raise ValueError("compressor training needs at least 2 volumes")
    data = _stack(volumes)
    if tuple(data.shape[2:]) != tuple(config.dims):
        raise ValueError(f"volume dims {tuple(data.shape[2:])} do not match config dims {config.dims}")
    torch.set_num_threads(1)
    gen = torch.Generator().manual_seed(config.seed)
    model = Compressor(config, generator=gen)
    opt_g, opt_d = _make_optimizers(model, config)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.module_state("model"))
        restore_optimizer(opt_g, "optim.gen", resume, resume.meta["optim"]["gen"])
        restore_optimizer(opt_d, "optim.disc", resume, resume.meta["optim"]["disc"])
        restore_rng(gen, resume.rng_state)
        start = resume.iteration
    perceptual = PerceptualSurrogate(config.perceptual_seed)
    w = config.weights
    warmup = int(config.gan_warmup * config.steps)
    stop = config.steps if steps is None else min(steps, config.steps)
    history = []
    writer = None
    if log_path is not None:
        fh = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if resume is None:
            writer.writeheader()

    try:
        for step in range(start, stop):
            if step % config.log_every == 0:
                model.codebook.reset_usage()
            idx = torch.randint(len(data), (config.batch_size,), generator=gen)
            k = int(torch.randint(config.dims[2], (1,), generator=gen))
            x = data[idx]
            x_hat, z, q = model(x)
            zq = lookup(q.indices, model.codebook)  # raw entries for the VQ term
            use_gan = w.gan > 0 and step >= warmup
            adv = generator_adv_loss(x_hat, k, model.d3d, model.d2d, w.alpha, w.beta) if use_gan else None
            total, terms = vqgan_loss(x, x_hat, z, zq, w, perceptual, adv, config.homogeneous)
            check_finite("vq", step, terms)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            disc = torch.zeros(())
            if use_gan:
                disc = -gan_loss(x, x_hat.detach(), k, model.d3d, model.d2d, w.alpha, w.beta)
                check_finite("vq", step, {"disc": disc})
                opt_d.zero_grad()
                disc.backward()
                opt_d.step()

            if (step + 1) % config.log_every == 0 or step + 1 == stop:
                row = {"step": step + 1, **{n: float(t.detach()) for n, t in terms.items()},
                       "total": float(total.detach()), "disc": float(disc.detach()), "usage": model.codebook.usage(), "slice": k}
                history.append(row)
                if writer is not None:
                    writer.writerow({f: (f"{row[f]:.8g}" if isinstance(row[f], float) else row[f])
                                     for f in LOG_FIELDS})
                log.info("vq step %d rec=%.4f vq=%.4f usage=%.3f", step + 1, row["rec"], row["vq"], row["usage"])
    finally:
        if writer is not None:
            fh.close()
    return model, compressor_checkpoint(model, opt_g, opt_d, gen, stop), history


def evaluate_usage(model: Compressor, volumes) -> float:
    """Reset the counters, quantize every volume once and report usage."""
    data = _stack(volumes)
    model.codebook.reset_usage()
    with torch.no_grad():
        for i in range(len(data)):
            model.quantize(model.encoder(data[i:i + 1]), update_usage=True)
    return model.codebook.usage()


def reconstruct(model: Compressor, volumes) -> np.ndarray:
    data = _stack(volumes)
    with torch.no_grad():
        out = [model(data[i:i + 1], update_usage=False)[0] for i in range(len(data))]
    return torch.cat(out)[:, 0].numpy()
