"""PSNR, volumetric SSIM, a random-feature perceptual surrogate and report
aggregation.

The perceptual score is NOT LPIPS: it uses frozen, seeded random 3D
convolutions instead of a pretrained network, so its values are only
comparable with themselves. Reports label it ``perceptual_surrogate``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import uniform_filter
from torch import nn
import torch.nn.functional as F

PSNR_CAP = 99.0
METRIC_COLUMNS = ("psnr", "ssim", "perceptual_surrogate")


def _values(a) -> np.ndarray:
    return np.asarray(getattr(a, "values", a), dtype=np.float64)


def psnr(a, b, data_range: float = 2.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return ``cap``."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim3d(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range: float = 2.0) -> float:
    """Mean SSIM over all valid positions of a uniform ``window``^3 box."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or min(a.shape) < window:
        raise ValueError(f"volume {a.shape} smaller than the {window}^3 window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    r = window // 2
    valid = tuple(slice(r, n - (window - 1 - r)) for n in a.shape)

    def mean(x):
        return uniform_filter(x, size=window, mode="constant")[valid]

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a * mu_a
    var_b = mean(b * b) - mu_b * mu_b
    cov = mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


class PerceptualSurrogate(nn.Module):
    """Frozen three-scale random-convolution feature distance.

    Filters and biases come from NumPy's PCG64 stream for ``seed`` so the
    extractor is identical on every machine. Features are unit-normalised
    across channels at each voxel; the score sums, over scales, the mean
    squared difference of the normalised features.
    """

    def __init__(self, seed: int = 0, channels=(8, 16, 16)):
        super().__init__()
        rng = np.random.Generator(np.random.PCG64(seed))
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        c_in = 1
        for c_out in channels:
            fan_in = c_in * 27
            w = rng.standard_normal((c_out, c_in, 3, 3, 3)) / math.sqrt(fan_in)
            bias = rng.standard_normal(c_out) * 0.1
            self.weights.append(nn.Parameter(torch.from_numpy(w).float(), requires_grad=False))
            self.biases.append(nn.Parameter(torch.from_numpy(bias).float(), requires_grad=False))
            c_in = c_out

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for level, (w, b) in enumerate(zip(self.weights, self.biases)):
            if level > 0:
                h = F.avg_pool3d(h, 2)
            h = F.silu(F.conv3d(h, w.to(h.dtype), b.to(h.dtype), padding=1))
            feats.append(h / (h.norm(dim=1, keepdim=True) + 1e-10))
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-batch-element distance for (B, 1, H, W, D) tensors."""
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        total = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
        for fa, fb in zip(self.features(a), self.features(b)):
            total = total + (fa - fb).pow(2).sum(dim=1).mean(dim=(1, 2, 3))
        return total


_SURROGATES: dict[int, PerceptualSurrogate] = {}


def perceptual_distance(a, b, seed: int = 0) -> float:
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or min(a.shape) < 4:
        raise ValueError("perceptual distance needs 3D volumes with every dim >= 4")
    if seed not in _SURROGATES:
        _SURROGATES[seed] = PerceptualSurrogate(seed).double()
    net = _SURROGATES[seed]
    with torch.no_grad():
        ta = torch.from_numpy(a)[None, None]
        tb = torch.from_numpy(b)[None, None]
        return float(net(ta, tb)[0])


@dataclass
class MetricReport:
    rows: list[dict]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["case", *METRIC_COLUMNS], lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (f"{row[k]:.6f}" if k != "case" else row[k]) for k in ["case", *METRIC_COLUMNS]})

    def to_json(self, path, config: dict | None = None) -> None:
        payload = {
            "n_cases": len(self.rows),
            "mean": self.mean,
            "std": self.std,
            "columns": list(METRIC_COLUMNS),
            "note": "perceptual_surrogate is a seeded random-feature distance, not LPIPS",
            "config": config or {},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def aggregate(rows: list[dict], columns=METRIC_COLUMNS) -> MetricReport:
    """Mean and sample standard deviation per metric; a single row has std 0."""
    if not rows:
        raise ValueError("cannot aggregate an empty report")
    mean, std = {}, {}
    for col in columns:
        vals = np.sort(np.array([float(r[col]) for r in rows], dtype=np.float64))
        mean[col] = float(np.mean(vals))
        std[col] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return MetricReport(list(rows), mean, std)
