"""Noise-prediction objective and the DDPM / DDIM reverse processes.

``model`` is any callable ``model(x_t, t, tokens) -> eps_hat`` with ``t`` a
length-B tensor of 1-based steps. Sampler arithmetic runs in float64; only
the network call sees the network's dtype.
"""

from __future__ import annotations

import numpy as np
import torch

from .schedule import NoiseSchedule, q_sample

MODES = ("ddpm", "ddim")


def dm_loss(x0: torch.Tensor, tokens: torch.Tensor, sched: NoiseSchedule, model,
            generator: torch.Generator) -> torch.Tensor:
    """Mean squared error between the drawn noise and the model's estimate."""
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    return (eps - model(x_t, t, tokens)).pow(2).mean()


def timesteps(T: int, steps: int) -> list[int]:
    """Descending 1-based steps, evenly strided from T down to 1."""
    if steps < 1:
        raise ValueError("need at least one sampling step")
    if steps > T:
        raise ValueError(f"steps ({steps}) exceed the schedule length ({T})")
    if steps == 1:
        return [T]
    return [int(t) for t in np.rint(np.linspace(1, T, steps))[::-1]]


def _ddim_step(x, eps, ab_t, ab_prev):
    x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def _ddpm_step(x, eps, ab_t, ab_prev, noise):
    beta = 1.0 - ab_t / ab_prev  # respaced beta for strided chains
    if beta <= 0.0:
        return x
    mean = (x - beta / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(1.0 - beta)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return mean + np.sqrt(var) * noise if var > 0 else mean


@torch.no_grad()
def sample(tokens: torch.Tensor, sched: NoiseSchedule, model, shape, mode: str = "ddim",
           steps: int | None = None, generator: torch.Generator | None = None,
           x_T: torch.Tensor | None = None, model_dtype=torch.float32, trajectory: list | None = None):
    """Run the reverse chain from x_T ~ N(0, I) and return x_0 (float64).

    ``shape`` is the latent batch shape (B, n_z, h, w, d). When given,
    ``trajectory`` collects x after every step (x_T first).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    ts = timesteps(sched.T, steps or sched.T)
    if x_T is None:
        x = torch.randn(tuple(shape), generator=generator, dtype=torch.float64)
    else:
        x = x_T.to(torch.float64).clone()
    if trajectory is not None:
        trajectory.append(x.clone())
    b = x.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
        eps = model(x.to(model_dtype), torch.full((b,), t, dtype=torch.int64), tokens).to(torch.float64)
        if mode == "ddim":
            x = _ddim_step(x, eps, ab_t, ab_prev)
        else:
            noise = torch.randn(x.shape, generator=generator, dtype=torch.float64) if t_prev > 0 else None
            x = _ddpm_step(x, eps, ab_t, ab_prev, noise if noise is not None else torch.zeros_like(x))
        if trajectory is not None:
            trajectory.append(x.clone())
    return x
