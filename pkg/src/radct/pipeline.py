"""Corpus synthesis, staged training, reconstruction and evaluation.

Everything lives under one work directory::

    corpus/case_000.xvol   normalized CT (f32)
    corpus/case_000.ximg   frontal line-integral radiograph
    checkpoints/{vq,prior,dm}.xckp
    logs/{vq,prior,dm}.csv
    reports/metrics.csv, reports/metrics.json
    manifest.json

The manifest records the config hash, a sha256 for every artifact, the
train/test split, seeds and per-stage wall-clock. Dependent stages verify
the hashes of their inputs before starting.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .diffusion.sampler import sample
from .diffusion.train import latent_targets, load_denoiser, snap_latent, train_diffusion
from .export import save_center_slices
from .metrics import aggregate, perceptual_distance, psnr, ssim3d
from .prior import encode_prior, load_prior_encoder, radiograph_tensor, tokens_from_latent, train_prior_encoder
from .projector import Radiograph, drr, load_radiograph, save_radiograph
from .volume import PhantomParams, Unit, Volume, generate_phantom, load_volume, normalize_hu, save_volume
from .vq.model import LatentGrid
from .vq.train import load_compressor, train_compressor

log = logging.getLogger(__name__)

STAGES = ("vq", "prior", "dm")
REQUIRES = {"vq": (), "prior": ("vq",), "dm": ("vq", "prior")}


class DependencyError(RuntimeError):
    """A required upstream artifact is missing or fails its hash check."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"missing dependency {stage!r}: {detail}")
        self.stage = stage


class GeometryError(ValueError):
    pass


class RunManifest:
    def __init__(self, workdir, data: dict | None = None):
        self.workdir = Path(workdir)
        self.data = data or {"config_hash": None, "corpus": None, "stages": {}, "reports": {}, "seeds": {}}

    @property
    def path(self) -> Path:
        return self.workdir / "manifest.json"

    @classmethod
    def load(cls, workdir) -> "RunManifest":
        path = Path(workdir) / "manifest.json"
        if not path.exists():
            return cls(workdir)
        return cls(workdir, json.loads(path.read_text()))

    def save(self) -> None:
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def entry(self, rel: str) -> dict:
        return {"path": rel, "sha256": file_sha256(self.workdir / rel)}

    def verify(self, entry: dict, stage: str) -> Path:
        path = self.workdir / entry["path"]
        if not path.exists():
            raise DependencyError(stage, f"{entry['path']} does not exist")
        if file_sha256(path) != entry["sha256"]:
            raise DependencyError(stage, f"{entry['path']} does not match its recorded hash")
        return path

    def checkpoint_path(self, stage: str) -> Path:
        info = self.data["stages"].get(stage)
        if info is None:
            raise DependencyError(stage, f"stage {stage!r} has not been trained in {self.workdir}")
        return self.verify(info["checkpoint"], stage)

    def artifacts(self) -> list[dict]:
        out = []
        corpus = self.data.get("corpus") or {}
        for case in corpus.get("cases", []):
            out += [case["volume"], case["radiograph"]]
        for info in self.data["stages"].values():
            out += [info["checkpoint"], info["log"]]
        out += list(self.data["reports"].values())
        return out


# ---------------------------------------------------------------- corpus

def case_name(i: int) -> str:
    return f"case_{i:03d}"


def cmd_synth(config: PipelineConfig, workdir) -> RunManifest:
    """Generate seeded phantoms, their normalized volumes and frontal DRRs."""
    workdir = Path(workdir)
    (workdir / "corpus").mkdir(parents=True, exist_ok=True)
    dc = config.data
    extent = tuple(n * s for n, s in zip(dc.dims, dc.spacing))
    cases = []
    for i in range(dc.n_phantoms):
        params = PhantomParams.from_seed(dc.seed + i, extent)
        hu, _ = generate_phantom(params, dc.dims, dc.spacing)
        rel_v, rel_r = f"corpus/{case_name(i)}.xvol", f"corpus/{case_name(i)}.ximg"
        save_volume(normalize_hu(hu), workdir / rel_v)
        save_radiograph(drr(hu, config.projector), workdir / rel_r)
        cases.append({"name": case_name(i), "seed": dc.seed + i})
    manifest = RunManifest(workdir)
    for case in cases:
        case["volume"] = manifest.entry(f"corpus/{case['name']}.xvol")
        case["radiograph"] = manifest.entry(f"corpus/{case['name']}.ximg")
    names = [c["name"] for c in cases]
    manifest.data["config_hash"] = config.hash()
    manifest.data["corpus"] = {"cases": cases, "train": names[:dc.n_train], "test": names[dc.n_train:]}
    manifest.data["seeds"] = {"data": dc.seed}
    manifest.save()
    (workdir / "config.json").write_text(config.to_json())
    log.info("synthesised %d cases (%d train / %d test)", len(cases), dc.n_train, len(cases) - dc.n_train)
    return manifest


def _corpus(manifest: RunManifest, split: str):
    corpus = manifest.data.get("corpus")
    if not corpus:
        raise DependencyError("synth", f"no corpus in {manifest.workdir}; run synth first")
    by_name = {c["name"]: c for c in corpus["cases"]}
    vols, rads = [], []
    for name in corpus[split]:
        case = by_name[name]
        vols.append(load_volume(manifest.verify(case["volume"], "synth")))
        rads.append(load_radiograph(manifest.verify(case["radiograph"], "synth")))
    return corpus[split], vols, rads


# ---------------------------------------------------------------- training

def _load_stage(manifest: RunManifest, stage: str):
    return load_checkpoint(manifest.checkpoint_path(stage))


def cmd_train(stage: str, config: PipelineConfig, workdir) -> RunManifest:
    """Train one stage after verifying every upstream artifact."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    manifest = RunManifest.load(workdir)
    for dep in REQUIRES[stage]:
        manifest.checkpoint_path(dep)
    _, vols, rads = _corpus(manifest, "train")
    wd = Path(workdir)
    (wd / "checkpoints").mkdir(exist_ok=True)
    (wd / "logs").mkdir(exist_ok=True)
    rel_ckpt, rel_log = f"checkpoints/{stage}.xckp", f"logs/{stage}.csv"
    start = time.perf_counter()

    if stage == "vq":
        _, ckpt, _ = train_compressor([v.values for v in vols], config.vq, log_path=wd / rel_log)
        seed = config.vq.seed
    elif stage == "prior":
        compressor = load_compressor(_load_stage(manifest, "vq"))
        _, ckpt, _ = train_prior_encoder(rads, [v.values for v in vols], compressor, config.prior,
                                         log_path=wd / rel_log)
        seed = config.prior.seed
    else:
        compressor = load_compressor(_load_stage(manifest, "vq"))
        prior, codebook, mode = load_prior_encoder(_load_stage(manifest, "prior"))
        latents, scale = latent_targets(compressor, [v.values for v in vols])
        with torch.no_grad():
            tokens = torch.cat([tokens_from_latent(prior(radiograph_tensor(r)), codebook, mode)[0] for r in rads])
        _, ckpt, _ = train_diffusion(latents, tokens, config.dm, scale, log_path=wd / rel_log)
        seed = config.dm.seed

    save_checkpoint(wd / rel_ckpt, ckpt)
    elapsed = time.perf_counter() - start
    manifest.data["stages"][stage] = {"checkpoint": manifest.entry(rel_ckpt), "log": manifest.entry(rel_log),
                                      "iteration": ckpt.iteration, "seconds": round(elapsed, 3)}
    manifest.data["seeds"][stage] = seed
    manifest.data["config_hash"] = config.hash()
    # downstream stages were trained against the old artifact
    for later in STAGES[STAGES.index(stage) + 1:]:
        manifest.data["stages"].pop(later, None)
    manifest.data["reports"] = {}
    manifest.save()
    log.info("stage %s done in %.1fs", stage, elapsed)
    return manifest


# ---------------------------------------------------------------- inference

@dataclass
class Models:
    compressor: object
    prior: object
    codebook: torch.Tensor
    lookup_mode: str
    denoiser: object
    dm_config: object
    latent_scale: float

    @classmethod
    def load(cls, workdir) -> "Models":
        manifest = RunManifest.load(workdir)
        for stage in STAGES:
            manifest.checkpoint_path(stage)
        compressor = load_compressor(_load_stage(manifest, "vq"))
        prior, codebook, mode = load_prior_encoder(_load_stage(manifest, "prior"))
        denoiser, dm_config, scale = load_denoiser(_load_stage(manifest, "dm"))
        for m in (compressor, prior, denoiser):
            m.eval()
        return cls(compressor, prior, codebook, mode, denoiser, dm_config, scale)


def reconstruct(r: Radiograph, models: Models, mode: str | None = None, steps: int | None = None,
                seed: int = 0, spacing=None, n_samples: int | None = None) -> tuple[Volume, LatentGrid]:
    """Radiograph -> prior tokens -> sampled latent -> snapped codes -> decoded CT.

    With ``n_samples`` > 1 the returned volume is the voxel-wise mean of that
    many decoded samples (all drawn from one generator seeded with ``seed``,
    so the first sample is the ``n_samples=1`` result). The returned latent
    is the first sample's.
    """
    cfg = models.prior.config
    if tuple(r.dims) != tuple(cfg.image_dims):
        raise GeometryError(f"radiograph dims {r.dims} do not match the trained geometry {cfg.image_dims}")
    torch.set_num_threads(1)
    dmc = models.dm_config
    tokens = torch.from_numpy(encode_prior(r, models.prior, models.codebook, models.lookup_mode).tokens)[None]
    gen = torch.Generator().manual_seed(seed)
    shape = (1, dmc.unet.n_z, *dmc.unet.latent_dims)
    n = n_samples or dmc.n_samples
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    decoded, first = [], None
    for _ in range(n):
        x = sample(tokens.float(), dmc.schedule(), models.denoiser, shape, mode or dmc.sample_mode,
                   steps or dmc.sample_steps, gen)
        zq, idx = snap_latent(x, models.latent_scale, models.compressor.codebook.entries, models.lookup_mode)
        first = first or (zq, idx)
        with torch.no_grad():
            decoded.append(models.compressor.decoder(zq)[0, 0].double())
    out = torch.stack(decoded).mean(0).numpy().astype(np.float32)
    zq, idx = first
    if spacing is None:
        # isotropic voxels: depth spacing follows the detector column spacing
        spacing = (r.spacing[0], r.spacing[1], r.spacing[1])
    return Volume(out, spacing, Unit.NORMALIZED), LatentGrid.from_tensor(zq, idx)


def cmd_reconstruct(radiograph_path, workdir, out_prefix, mode: str | None = None, steps: int | None = None,
                    seed: int = 0, n_samples: int | None = None) -> dict:
    """Write ``<prefix>.xvol``, ``<prefix>_latent.npz`` and three centre-slice PNGs."""
    models = Models.load(workdir)
    r = load_radiograph(radiograph_path)
    vol, latent = reconstruct(r, models, mode, steps, seed, n_samples=n_samples)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_volume(vol, prefix.with_name(prefix.name + ".xvol"))
    np.savez(prefix.with_name(prefix.name + "_latent.npz"), values=latent.values, indices=latent.indices)
    pngs = save_center_slices(vol.values, prefix)
    return {"volume": str(prefix.with_name(prefix.name + ".xvol")),
            "latent": str(prefix.with_name(prefix.name + "_latent.npz")), "slices": [str(p) for p in pngs]}


def mean_volume(volumes) -> np.ndarray:
    return np.mean(np.stack([v.values.astype(np.float64) for v in volumes]), axis=0)


def cmd_evaluate(config: PipelineConfig, workdir, mode: str | None = None, steps: int | None = None,
                 seed: int = 0, n_samples: int | None = None):
    """Reconstruct every test case and write the CSV / JSON metric report.

    The JSON summary also records, per case, the PSNR of the mean training
    volume: the trivial baseline a reconstruction has to beat.
    """
    manifest = RunManifest.load(workdir)
    models = Models.load(workdir)
    names, vols, rads = _corpus(manifest, "test")
    if not names:
        raise ValueError("test split is empty")
    _, train_vols, _ = _corpus(manifest, "train")
    baseline = mean_volume(train_vols)
    rows, base_rows = [], {}
    for i, (name, v, r) in enumerate(zip(names, vols, rads)):
        rec, _ = reconstruct(r, models, mode, steps, seed + i, n_samples=n_samples)
        rows.append({"case": name, "psnr": psnr(v, rec), "ssim": ssim3d(v, rec),
                     "perceptual_surrogate": perceptual_distance(v, rec, config.vq.perceptual_seed)})
        base_rows[name] = psnr(v.values, baseline)
    report = aggregate(rows)
    wd = Path(workdir)
    (wd / "reports").mkdir(exist_ok=True)
    report.to_csv(wd / "reports/metrics.csv")
    echo = {"config_hash": config.hash(), "sampler": {"mode": mode or config.dm.sample_mode,
                                                       "steps": steps or config.dm.sample_steps, "seed": seed,
                                                       "n_samples": n_samples or models.dm_config.n_samples},
            "mean_train_volume_psnr": base_rows}
    report.to_json(wd / "reports/metrics.json", echo)
    manifest.data["reports"] = {"csv": manifest.entry("reports/metrics.csv"),
                                "json": manifest.entry("reports/metrics.json")}
    manifest.save()
    return report, base_rows
