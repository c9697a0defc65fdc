"""Linear-beta noise schedule and the forward corruption q(x_t | x_0).

Timesteps are 1-based: ``t`` in ``1..T``; array index ``t - 1``. By
convention ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t) -> np.ndarray | float:
        """alpha_bar at 1-based ``t``; t = 0 gives 1."""
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[t] if t.ndim else float(ab[int(t)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": float(self.betas[0]),
                "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end``; products in float64."""
    if int(T) < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _check_t(t, T: int):
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > T):
        raise ValueError(f"timestep outside [1, {T}]")
    return t


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` is an int or a length-B tensor of 1-based steps.
    """
    if eps.shape != x0.shape:
        raise ValueError("noise must have the same shape as x0")
    t = _check_t(t, sched.T)
    ab = torch.as_tensor(sched.alpha_bar(t.numpy()), dtype=torch.float64)
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    out = ab.sqrt() * x0.double() + (1.0 - ab).sqrt() * eps.double()
    return out.to(x0.dtype)
