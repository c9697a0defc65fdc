"""Radiograph -> 3D prior tokens.

A small 2D stack turns the radiograph into one feature vector per latent
column ``(i, j)``; a single MLP shared by all columns expands that vector
into the whole depth column, giving a rough feature volume. 3D convolutions
refine it and project to the compressor's latent width, and the result is
snapped to the frozen compressor codebook and z-scored into tokens.

Tokens are flattened with ``i`` fastest: ``t = i + h * (j + w * k)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import (Checkpoint, module_tensors, optimizer_tensors, restore_optimizer, restore_rng,
                         rng_bytes)
from .nn_init import seeded_init
from .projector import Radiograph
from .vq.model import Compressor
from .vq.quantizer import Codebook, nearest_indices, to_sites, zscore
from .vq.train import check_finite

log = logging.getLogger(__name__)


@dataclass
class PriorConfig:
    image_dims: tuple = (32, 32)
    latent_dims: tuple = (8, 8, 8)
    n_z: int = 8
    feature_depth: int = 2  # 0: receptive field of one latent column
    features: int = 32
    mlp_hidden: int = 64
    channels: int = 16
    refine_layers: int = 2
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 16
    ce_weight: float = 0.1
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.image_dims = tuple(self.image_dims)
        self.latent_dims = tuple(self.latent_dims)
        H, W = self.image_dims
        h, w, _ = self.latent_dims
        if H % h or W % w or H // h != W // w:
            raise ValueError(f"image dims {self.image_dims} must be a common multiple of latent {self.latent_dims[:2]}")
        if self.feature_depth not in (0, 2):
            raise ValueError("feature_depth must be 0 or 2")

    @property
    def stride(self) -> int:
        return self.image_dims[0] // self.latent_dims[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_dims"], d["latent_dims"] = list(self.image_dims), list(self.latent_dims)
        return d


@dataclass
class PriorTokens:
    tokens: np.ndarray  # (h*w*d, n_z)
    grid_dims: tuple

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.grid_dims = tuple(int(g) for g in self.grid_dims)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != int(np.prod(self.grid_dims)):
            raise ValueError(f"expected {int(np.prod(self.grid_dims))} tokens, got {self.tokens.shape}")

    def grid(self) -> np.ndarray:
        """De-flatten to (h, w, d, n_z)."""
        h, w, d = self.grid_dims
        return self.tokens.reshape(d, w, h, -1).transpose(2, 1, 0, 3)


def flatten_tokens(z: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w, d) -> (B, h*w*d, C), i fastest."""
    b, c = z.shape[:2]
    return z.permute(0, 4, 3, 2, 1).reshape(b, -1, c)


class PriorEncoder(nn.Module):
    def __init__(self, config: PriorConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.config = c = config or PriorConfig()
        s = c.stride
        if c.feature_depth == 2:
            self.stack2d = nn.Sequential(nn.Conv2d(1, 8, 3, padding=1), nn.SiLU(),
                                         nn.Conv2d(8, 8, 3, padding=1), nn.SiLU())
            unshuffled = 8 * s * s
        else:
            self.stack2d = nn.Identity()
            unshuffled = s * s
        self.features = nn.Conv2d(unshuffled, c.features, 1)
        d = c.latent_dims[2]
        self.column_mlp = nn.Sequential(nn.Linear(c.features, c.mlp_hidden), nn.SiLU(),
                                        nn.Linear(c.mlp_hidden, c.channels * d))
        refine = []
        for _ in range(c.refine_layers):
            refine += [nn.Conv3d(c.channels, c.channels, 3, padding=1), nn.SiLU()]
        self.refine = nn.Sequential(*refine)
        self.proj = nn.Conv3d(c.channels, c.n_z, 3, padding=1)
        if generator is not None:
            seeded_init(self, generator)

    def lift_columns(self, r: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) radiograph -> rough feature volume (B, C, h, w, d)."""
        c = self.config
        if tuple(r.shape[2:]) != c.image_dims:
            raise ValueError(f"radiograph dims {tuple(r.shape[2:])} do not match configured {c.image_dims}")
        f = self.features(F.pixel_unshuffle(self.stack2d(r), c.stride))  # (B, F, h, w)
        b, _, h, w = f.shape
        cols = self.column_mlp(f.permute(0, 2, 3, 1))  # (B, h, w, C*d)
        cols = cols.reshape(b, h, w, c.channels, c.latent_dims[2])
        return cols.permute(0, 3, 1, 2, 4)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        """Continuous latent prediction Conv(v_hat), shape (B, n_z, h, w, d)."""
        return self.proj(self.refine(self.lift_columns(r)))


def radiograph_tensor(r: Radiograph | np.ndarray) -> torch.Tensor:
    """Network input: per-image min-max rescaled line integrals, (1, 1, H, W)."""
    img = r.rescaled() if isinstance(r, Radiograph) else np.asarray(r, dtype=np.float64)
    return torch.from_numpy(img.astype(np.float32))[None, None]


def tokens_from_latent(pred: torch.Tensor, codebook: Codebook | torch.Tensor, lookup_mode: str = "raw"):
    """Quantize against the frozen codebook and z-score: (B, h*w*d, n_z) tokens and indices."""
    entries = codebook.entries if isinstance(codebook, Codebook) else codebook
    if pred.shape[1] != entries.shape[1]:
        raise ValueError(f"prior latent width {pred.shape[1]} != codebook dim {entries.shape[1]}")
    idx = nearest_indices(to_sites(pred), entries, lookup_mode)
    b, _, h, w, d = pred.shape
    picked = entries.detach()[idx].reshape(b, h, w, d, -1).permute(0, 4, 1, 2, 3)
    return flatten_tokens(zscore(picked, dim=1)), idx.reshape(b, h, w, d)


def encode_prior(r, model: PriorEncoder, codebook, lookup_mode: str = "raw") -> PriorTokens:
    with torch.no_grad():
        tokens, _ = tokens_from_latent(model(radiograph_tensor(r)), codebook, lookup_mode)
    return PriorTokens(tokens[0].numpy(), model.config.latent_dims)


def index_logits(pred_sites: torch.Tensor, entries: torch.Tensor, lookup_mode: str = "raw") -> torch.Tensor:
    """Negative squared distances to every codebook entry (in lookup geometry)."""
    if lookup_mode == "normalized":
        pred_sites, entries = zscore(pred_sites), zscore(entries)
    d2 = (pred_sites * pred_sites).sum(1, keepdim=True) - 2 * pred_sites @ entries.T + (entries * entries).sum(1)
    return -d2


def prior_loss(model: PriorEncoder, r, target, target_idx, entries, lookup_mode, ce_weight):
    pred = model(r)
    if lookup_mode == "normalized":
        # compare in the geometry the codebook lookup uses
        mse = F.mse_loss(zscore(pred, dim=1), zscore(target, dim=1))
    else:
        mse = F.mse_loss(pred, target)
    ce = F.cross_entropy(index_logits(to_sites(pred), entries, lookup_mode), target_idx.reshape(-1))
    return mse + ce_weight * ce, {"mse": mse, "ce": ce}


def prior_targets(compressor: Compressor, volumes) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen-encoder latents E(x) and their code indices for each volume."""
    data = torch.from_numpy(np.stack([np.asarray(getattr(v, "values", v), dtype=np.float32)
                                      for v in volumes]))[:, None]
    with torch.no_grad():
        z = torch.cat([compressor.encoder(data[i:i + 1]) for i in range(len(data))])
        idx = nearest_indices(to_sites(z), compressor.codebook.entries, compressor.config.lookup_mode)
    b, _, h, w, d = z.shape
    return z, idx.reshape(b, h, w, d)


def index_accuracy(model: PriorEncoder, radiographs: torch.Tensor, target_idx: torch.Tensor, entries,
                   lookup_mode: str) -> float:
    with torch.no_grad():
        pred = torch.cat([model(radiographs[i:i + 1]) for i in range(len(radiographs))])
        idx = nearest_indices(to_sites(pred), entries, lookup_mode)
    return float((idx == target_idx.reshape(-1)).double().mean())


def majority_baseline(target_idx: torch.Tensor) -> float:
    counts = torch.bincount(target_idx.reshape(-1))
    return float(counts.max()) / target_idx.numel()


def prior_checkpoint(model: PriorEncoder, opt, gen, iteration: int, codebook: torch.Tensor, lookup_mode: str,
                     extra: dict | None = None) -> Checkpoint:
    tensors = module_tensors("model", model)
    t_opt, groups = optimizer_tensors("optim", opt)
    tensors.update(t_opt)
    meta = {"stage": "prior", "config": model.config.to_dict(), "lookup_mode": lookup_mode,
            "optim": groups, **(extra or {})}
    return Checkpoint(tensors, meta, iteration, codebook.detach().numpy().copy(), None, rng_bytes(gen))


def load_prior_encoder(ckpt: Checkpoint) -> tuple[PriorEncoder, torch.Tensor, str]:
    if ckpt.meta.get("stage") != "prior":
        raise ValueError(f"not a prior-encoder checkpoint (stage={ckpt.meta.get('stage')!r})")
    model = PriorEncoder(PriorConfig(**ckpt.meta["config"]))
    model.load_state_dict(ckpt.module_state("model"))
    return model, torch.from_numpy(ckpt.codebook.copy()), ckpt.meta["lookup_mode"]


def train_prior_encoder(radiographs, volumes, compressor: Compressor, config: PriorConfig,
                        resume: Checkpoint | None = None, log_path=None, extra_meta: dict | None = None):
    """Fit the prior encoder to the frozen compressor's latents.

    ``radiographs`` are Radiographs or pre-rescaled (H, W) arrays paired with
    normalized ``volumes``. Loss = MSE(Conv(v_hat), E(x)) + ce_weight * CE
    over code indices; in normalized lookup mode both MSE sides are z-scored. Returns ``(model, checkpoint, history)``; the final
    history row carries the index accuracy and the majority-class baseline.
    """
    if compressor is None:
        raise ValueError("prior encoder training needs a frozen compressor")
    if len(radiographs) != len(volumes) or not radiographs:
        raise ValueError("need a non-empty set of (radiograph, volume) pairs")
    torch.set_num_threads(1)
    compressor.eval()
    for p in compressor.parameters():
        p.requires_grad_(False)
    entries = compressor.codebook.entries.detach().clone()
    mode = compressor.config.lookup_mode
    if entries.shape[1] != config.n_z:
        raise ValueError(f"codebook dim {entries.shape[1]} != prior n_z {config.n_z}")
    rad = torch.cat([radiograph_tensor(r) for r in radiographs])
    target, target_idx = prior_targets(compressor, volumes)
    if tuple(target.shape[2:]) != config.latent_dims:
        raise ValueError(f"compressor latent dims {tuple(target.shape[2:])} != prior {config.latent_dims}")

    gen = torch.Generator().manual_seed(config.seed)
    model = PriorEncoder(config, generator=gen)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.module_state("model"))
        restore_optimizer(opt, "optim", resume, resume.meta["optim"])
        restore_rng(gen, resume.rng_state)
        start = resume.iteration

    history = []
    fh = open(log_path, "a" if resume else "w", newline="") if log_path else None
    writer = csv.DictWriter(fh, fieldnames=["step", "loss", "mse", "ce"], lineterminator="\n") if fh else None
    if writer and not resume:
        writer.writeheader()
    try:
        for step in range(start, config.steps):
            idx = torch.randint(len(rad), (config.batch_size,), generator=gen)
            loss, terms = prior_loss(model, rad[idx], target[idx], target_idx[idx], entries, mode, config.ce_weight)
            check_finite("prior", step, {"loss": loss, **terms})
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step == start or (step + 1) % config.log_every == 0 or step + 1 == config.steps:
                row = {"step": step + 1, "loss": float(loss.detach()), "mse": float(terms["mse"].detach()),
                       "ce": float(terms["ce"].detach())}
                history.append(row)
                if writer:
                    writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
                log.info("prior step %d loss=%.4f", step + 1, row["loss"])
    finally:
        if fh:
            fh.close()
    acc = index_accuracy(model, rad, target_idx, entries, mode)
    base = majority_baseline(target_idx)
    history.append({"step": config.steps, "index_accuracy": acc, "majority_baseline": base})
    extra = {"index_accuracy": acc, "majority_baseline": base, **(extra_meta or {})}
    return model, prior_checkpoint(model, opt, gen, config.steps, entries, mode, extra), history
