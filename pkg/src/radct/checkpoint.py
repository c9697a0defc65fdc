"""XCKP checkpoint files.

Layout (all little-endian)::

    magic "XCKP" | version u16 | iteration u64
    meta_len u32 | meta (UTF-8 JSON)
    n_tensors u32 | n_tensors x [name_len u16 | name | dtype u8 | ndim u8 | shape ndim x u32 | payload]
    has_codebook u8 | [n u32 | n_z u32 | entries n*n_z f32 | usage n u64]
    rng_len u32 | rng state bytes

Tensor payloads are C-order. dtype 0 is f32; 1 (i64) is used only for
integer buffers.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"XCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    iteration: int = 0
    codebook: np.ndarray | None = None
    usage: np.ndarray | None = None
    rng_state: bytes = b""

    def module_state(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(p)}


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHQ", MAGIC, VERSION, int(ckpt.iteration)))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = _as_numpy(ckpt.tensors[name])
        if np.issubdtype(arr.dtype, np.integer):
            code = 1
        elif np.issubdtype(arr.dtype, np.floating):
            code = 0
        else:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    if ckpt.codebook is None:
        buf.write(struct.pack("<B", 0))
    else:
        entries = np.ascontiguousarray(_as_numpy(ckpt.codebook), dtype="<f4")
        n, n_z = entries.shape
        usage = np.zeros(n, dtype="<u8") if ckpt.usage is None else np.asarray(_as_numpy(ckpt.usage), dtype="<u8")
        buf.write(struct.pack("<BII", 1, n, n_z))
        buf.write(entries.tobytes())
        buf.write(usage.tobytes())
    buf.write(struct.pack("<I", len(ckpt.rng_state)))
    buf.write(ckpt.rng_state)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic, version, iteration = r.unpack("4sHQ")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_tensors,) = r.unpack("I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype code {code}")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    (has_cb,) = r.unpack("B")
    codebook = usage = None
    if has_cb:
        n, n_z = r.unpack("II")
        codebook = np.frombuffer(r.take(n * n_z * 4), dtype="<f4").reshape(n, n_z).astype(np.float32)
        usage = np.frombuffer(r.take(n * 8), dtype="<u8").astype(np.int64)
    (rng_len,) = r.unpack("I")
    rng_state = r.take(rng_len)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(tensors, meta, iteration, codebook, usage, rng_state)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": _as_numpy(v) for k, v in module.state_dict().items()}


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], list]:
    """Flatten optimizer state to named tensors; param groups go to the meta block."""
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"{prefix}.{idx}.{key}"] = _as_numpy(torch.as_tensor(value))
    return tensors, sd["param_groups"]


def restore_optimizer(opt: torch.optim.Optimizer, prefix: str, ckpt: Checkpoint, groups: list) -> None:
    p = prefix + "."
    state: dict[int, dict] = {}
    for name, arr in ckpt.tensors.items():
        if not name.startswith(p):
            continue
        idx, key = name[len(p):].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


def rng_bytes(gen: torch.Generator) -> bytes:
    return gen.get_state().numpy().tobytes()


def restore_rng(gen: torch.Generator, state: bytes) -> None:
    gen.set_state(torch.frombuffer(bytearray(state), dtype=torch.uint8))
