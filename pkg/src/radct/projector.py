"""Parallel-beam digitally reconstructed radiographs.

Rays travel along the anterior-posterior axis for the frontal view, so each
radiograph pixel ``(i, j)`` lines up exactly with a column of the volume.
Oblique views rotate the rays about the superior-inferior axis and sample the
volume trilinearly.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .volume import Unit, Volume, VolumeFormatError

MU_WATER = 0.0206  # mm^-1, roughly 60 keV effective energy

_XIMG_MAGIC = b"XIMG"
_XIMG_VERSION = 1
_XIMG_HEADER = struct.Struct("<4sH2I2fBB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class Domain(enum.IntEnum):
    LINE_INTEGRAL = 0
    INTENSITY = 1


@dataclass
class Radiograph:
    values: np.ndarray
    domain: Domain = Domain.LINE_INTEGRAL
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"radiograph must be 2D, got shape {values.shape}")
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("radiograph contains non-finite values")
        self.domain = Domain(self.domain)
        if self.domain is Domain.LINE_INTEGRAL and values.min() < 0:
            raise ValueError("line integrals must be non-negative")
        if self.domain is Domain.INTENSITY and (values.min() < 0 or values.max() > 1):
            raise ValueError("intensities must lie in [0, 1]")
        self.values = values
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(n) for n in self.values.shape)

    def rescaled(self) -> np.ndarray:
        """Per-image min-max rescale to [0, 1]; the network input domain."""
        v = self.values.astype(np.float64)
        lo, hi = v.min(), v.max()
        if hi - lo <= 0:
            return np.zeros_like(v)
        return (v - lo) / (hi - lo)


@dataclass
class ProjectorConfig:
    mu_water: float = MU_WATER
    intensity_output: bool = False
    gantry_angle: float = 0.0
    samples_per_voxel: int = 4

    def __post_init__(self):
        if not self.mu_water > 0:
            raise ValueError("mu_water must be positive")


def hu_to_attenuation(v: Volume, mu_water: float = MU_WATER) -> Volume:
    """Linear attenuation ``mu_water * (1 + HU/1000)``, clamped at zero."""
    if v.unit is not Unit.HU:
        raise ValueError(f"expected an HU volume, got {v.unit.name}")
    mu = mu_water * (1.0 + v.values.astype(np.float64) / 1000.0)
    return v.with_values(np.maximum(mu, 0.0).astype(v.values.dtype), Unit.ATTENUATION)


def _require_attenuation(v: Volume):
    if v.unit is not Unit.ATTENUATION:
        raise ValueError(f"projection needs an attenuation volume, got {v.unit.name}")


def project_frontal(v: Volume) -> Radiograph:
    """Axis-aligned line integral along ``k``, accumulated in ascending order."""
    _require_attenuation(v)
    mu = v.values
    acc = np.zeros(mu.shape[:2], dtype=np.float64)
    for k in range(mu.shape[2]):
        acc += mu[:, :, k]
    acc *= v.spacing[2]
    return Radiograph(acc, Domain.LINE_INTEGRAL, v.spacing[:2])


def project_angle(v: Volume, angle: float, samples_per_voxel: int = 4) -> Radiograph:
    """Parallel-beam projection with rays rotated by ``angle`` degrees about ``i``.

    At ``angle=0`` the ray points along +k; at 90 degrees along -j. The
    detector has W pixels with the volume's j spacing. Samples are taken at
    midpoints of sub-intervals of length ``spacing/samples_per_voxel`` whose
    edges coincide with voxel centres for axis-aligned rays, so the midpoint
    rule integrates the piecewise-linear interpolant exactly there.
    """
    _require_attenuation(v)
    if not math.isfinite(angle):
        raise ValueError("angle must be finite")
    if int(samples_per_voxel) < 1:
        raise ValueError("samples_per_voxel must be >= 1")
    n_sub = int(samples_per_voxel)
    H, W, D = v.dims
    _, sy, sz = v.spacing
    theta = math.radians(angle)
    e_u = np.array([math.cos(theta), math.sin(theta)])  # detector axis in (lr, ap) mm
    d = np.array([-math.sin(theta), math.cos(theta)])  # ray direction

    delta = min(sy, sz)
    h = delta / n_sub
    half_diag = 0.5 * math.hypot(W * sy, D * sz)
    pad = max(0, math.ceil(half_diag / delta - (D - 1) / 2.0 - 1.0))
    s_start = -((D - 1) / 2.0 + 1.0 + pad) * delta
    n_samples = int(round(-2.0 * s_start / h))
    s = s_start + (np.arange(n_samples) + 0.5) * h

    u = (np.arange(W) - (W - 1) / 2.0) * sy
    lr = u[:, None] * e_u[0] + s[None, :] * d[0]
    ap = u[:, None] * e_u[1] + s[None, :] * d[1]
    j_idx = lr / sy + (W - 1) / 2.0
    k_idx = ap / sz + (D - 1) / 2.0

    mu = v.values.astype(np.float64)
    out = np.empty((H, W), dtype=np.float64)
    for i in range(H):
        coords = np.stack([np.full(j_idx.shape, float(i)), j_idx, k_idx])
        samples = map_coordinates(mu, coords.reshape(3, -1), order=1, mode="grid-constant", cval=0.0)
        out[i] = samples.reshape(W, n_samples).sum(axis=1) * h
    return Radiograph(np.maximum(out, 0.0), Domain.LINE_INTEGRAL, (v.spacing[0], sy))


def to_intensity(r: Radiograph) -> Radiograph:
    """Beer-Lambert detector intensity ``exp(-line_integral)`` in (0, 1]."""
    if r.domain is not Domain.LINE_INTEGRAL:
        raise ValueError("to_intensity expects line integrals")
    return Radiograph(np.exp(-r.values.astype(np.float64)), Domain.INTENSITY, r.spacing)


def drr(v_hu: Volume, config: ProjectorConfig | None = None) -> Radiograph:
    """HU volume to radiograph following ``config``."""
    config = config or ProjectorConfig()
    mu = hu_to_attenuation(v_hu, config.mu_water)
    if config.gantry_angle == 0.0:
        r = project_frontal(mu)
    else:
        r = project_angle(mu, config.gantry_angle, config.samples_per_voxel)
    return to_intensity(r) if config.intensity_output else r


def save_radiograph(r: Radiograph, path) -> None:
    code = 1 if r.values.dtype == np.float64 else 0
    header = _XIMG_HEADER.pack(_XIMG_MAGIC, _XIMG_VERSION, *r.dims, *r.spacing, int(r.domain), code)
    Path(path).write_bytes(header + r.values.astype(_DTYPES[code], copy=False).tobytes(order="F"))


def load_radiograph(path) -> Radiograph:
    data = Path(path).read_bytes()
    if len(data) < _XIMG_HEADER.size:
        raise VolumeFormatError("file shorter than header")
    magic, version, h, w, sx, sy, domain, code = _XIMG_HEADER.unpack_from(data)
    if magic != _XIMG_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {_XIMG_MAGIC!r}")
    if version != _XIMG_VERSION:
        raise VolumeFormatError(f"unsupported XIMG version {version}")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype code {code}")
    dt = _DTYPES[code]
    payload = data[_XIMG_HEADER.size:]
    if len(payload) != h * w * dt.itemsize:
        raise VolumeFormatError(
            f"dims/payload mismatch: dims {(h, w)} need {h * w * dt.itemsize} bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype=dt).reshape((h, w), order="F").astype(dt.newbyteorder("="))
    return Radiograph(np.ascontiguousarray(values), Domain(domain), (sx, sy))
