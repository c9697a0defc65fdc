"""Command-line entry point.

Exit codes: 0 ok, 2 configuration / input error, 3 missing dependency,
4 numerical abort. ``RADCT_LOG_LEVEL`` sets the log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import PROFILES, ConfigError, build_config
from .pipeline import DependencyError, GeometryError, cmd_evaluate, cmd_reconstruct, cmd_synth, cmd_train
from .volume import VolumeFormatError
from .vq.train import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("radct")


def _config(args):
    path = args.config
    if path is None and (Path(args.workdir) / "config.json").exists():
        path = Path(args.workdir) / "config.json"
    return build_config(path, args.profile, args.set or ())


def inspect_checkpoint(path) -> dict:
    ckpt = load_checkpoint(path)
    out = {
        "iteration": ckpt.iteration,
        "stage": ckpt.meta.get("stage"),
        "meta": {k: v for k, v in ckpt.meta.items() if k != "optim"},
        "tensors": {name: list(arr.shape) for name, arr in ckpt.tensors.items() if not name.startswith("optim")},
        "n_optimizer_tensors": sum(name.startswith("optim") for name in ckpt.tensors),
        "rng_state_bytes": len(ckpt.rng_state or b""),
    }
    if ckpt.codebook is not None:
        out["codebook"] = {"n": int(ckpt.codebook.shape[0]), "n_z": int(ckpt.codebook.shape[1])}
        if ckpt.usage is not None:
            out["codebook"]["usage"] = float(np.count_nonzero(ckpt.usage)) / len(ckpt.usage)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="JSON config file (default: <workdir>/config.json if present)")
    common.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set vq.steps=200 (repeatable)")

    sampler = argparse.ArgumentParser(add_help=False)
    sampler.add_argument("--mode", choices=["ddim", "ddpm"], help="sampler (default from config)")
    sampler.add_argument("--steps", type=int, help="sampling steps (default from config)")
    sampler.add_argument("--seed", type=int, default=0)
    sampler.add_argument("--samples", type=int, help="average this many decoded samples (default from config)")

    p = argparse.ArgumentParser(prog="radct", description="Single-radiograph CT reconstruction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the phantom / radiograph corpus")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=["vq", "prior", "dm"])
    r = sub.add_parser("reconstruct", parents=[common, sampler], help="reconstruct a CT from a radiograph")
    r.add_argument("--radiograph", required=True, help="XIMG radiograph file")
    r.add_argument("--out", required=True, help="output prefix for the volume, latent and slice PNGs")
    sub.add_parser("evaluate", parents=[common, sampler], help="score every held-out case")
    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON")
    i.add_argument("path")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "inspect-checkpoint":
        print(json.dumps(inspect_checkpoint(args.path), indent=2, sort_keys=True))
        return EXIT_OK
    config = _config(args)
    if args.command == "synth":
        m = cmd_synth(config, args.workdir)
        corpus = m.data["corpus"]
        print(f"{len(corpus['cases'])} cases: {len(corpus['train'])} train, {len(corpus['test'])} test")
    elif args.command == "train":
        m = cmd_train(args.stage, config, args.workdir)
        info = m.data["stages"][args.stage]
        print(f"{args.stage}: {info['checkpoint']['path']} ({info['seconds']:.1f}s)")
    elif args.command == "reconstruct":
        out = cmd_reconstruct(args.radiograph, args.workdir, args.out, args.mode, args.steps, args.seed, args.samples)
        print(json.dumps(out, indent=2))
    elif args.command == "evaluate":
        report, baseline = cmd_evaluate(config, args.workdir, args.mode, args.steps, args.seed, args.samples)
        for row in report.rows:
            print(f"{row['case']}: psnr {row['psnr']:.3f} (mean-volume baseline {baseline[row['case']]:.3f}) "
                  f"ssim {row['ssim']:.4f} perceptual {row['perceptual_surrogate']:.4f}")
        print("mean " + " ".join(f"{k} {v:.4f}" for k, v in report.mean.items()))
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("RADCT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except (ConfigError, GeometryError, VolumeFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
