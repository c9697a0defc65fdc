"""Volumes, procedural thorax phantoms, HU windowing and the XVOL file format.

Axis convention used everywhere in the package: a volume array has shape
``(H, W, D)`` = (superior-inferior, left-right, anterior-posterior). Index
``k`` grows towards the patient's back, so a frontal radiograph is indexed
by ``(i, j)`` and integrates over ``k``.

Phantom randomness comes from NumPy's PCG64 bit generator
(``numpy.random.Generator(numpy.random.PCG64(seed))``), which is portable and
stream-stable across platforms.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Unit",
    "Label",
    "Volume",
    "LabelMap",
    "PhantomParams",
    "VolumeFormatError",
    "generate_phantom",
    "normalize_hu",
    "save_volume",
    "load_volume",
    "volume_hash",
]

AIR_HU = -1000.0
HU_MIN, HU_MAX = -1024.0, 3071.0

_XVOL_MAGIC = b"XVOL"
_XVOL_VERSION = 1
# magic, version, dims, spacing, unit, dtype
_XVOL_HEADER = struct.Struct("<4sH3I3fBB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class Unit(enum.IntEnum):
    HU = 0
    NORMALIZED = 1
    ATTENUATION = 2


class Label(enum.IntEnum):
    BACKGROUND = 0
    BODY = 1
    LUNG = 2
    SPINE = 3
    RIB = 4
    HEART = 5


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent volume/radiograph files."""


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass
class Volume:
    """A 3D scalar grid with physical voxel spacing in mm.

    ``values`` keeps its dtype (float32 or float64). Spacing is rounded to
    float32 so that it survives a file round trip bit-exactly.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: Unit = Unit.HU

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {values.shape}")
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float32)
        if not np.all(np.isfinite(values)):
            raise ValueError("volume contains non-finite values")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        self.unit = Unit(self.unit)
        if self.unit is Unit.NORMALIZED and (values.min() < -1.0 or values.max() > 1.0):
            raise ValueError("normalized volume values must lie in [-1, 1]")
        if self.unit is Unit.ATTENUATION and values.min() < 0.0:
            raise ValueError("attenuation values must be non-negative")
        self.values = values
        self.spacing = tuple(_f32(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def with_values(self, values: np.ndarray, unit: Unit | None = None) -> "Volume":
        return Volume(values, self.spacing, self.unit if unit is None else unit)


@dataclass
class LabelMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 3:
            raise ValueError("label map must be 3D")
        allowed = np.array([int(lbl) for lbl in Label], dtype=np.uint8)
        if not np.isin(self.values, allowed).all():
            raise ValueError("label map contains values outside the organ enum")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]


# Default organ HU means. Heart sits above body so that the ordering
# lung < body < heart < rib < spine holds after +/-10% jitter.
DEFAULT_HU = {"lung": -800.0, "body": 30.0, "heart": 40.0, "rib": 500.0, "spine": 700.0}
HU_JITTER = 0.10


@dataclass
class PhantomParams:
    """Geometry (mm, relative to the volume centre) and HU values of a phantom.

    Centres are given as (superior-inferior, left-right, anterior-posterior)
    offsets; positive AP offset means posterior.
    """

    seed: int
    body: Ellipsoid
    lungs: tuple[Ellipsoid, Ellipsoid]
    heart: Ellipsoid
    spine_center: tuple[float, float]  # (lr, ap)
    spine_radius: float
    rib_levels: tuple[float, ...]  # si offsets
    rib_thickness: float
    rib_shell: tuple[float, float]  # inner/outer fraction of the body cross-section
    hu: dict = field(default_factory=lambda: dict(DEFAULT_HU))

    def __post_init__(self):
        radii = [*self.body.radii, *self.heart.radii, self.spine_radius, self.rib_thickness]
        for lung in self.lungs:
            radii.extend(lung.radii)
        if any(r <= 0 for r in radii):
            raise ValueError("all phantom radii must be positive")
        lo, hi = self.rib_shell
        if not 0 < lo < hi:
            raise ValueError("rib shell fractions must satisfy 0 < inner < outer")
        order = [self.hu[k] for k in ("lung", "body", "heart", "rib", "spine")]
        if any(a >= b for a, b in zip(order, order[1:])):
            raise ValueError(f"organ HU must satisfy lung < body < heart < rib < spine, got {order}")

    @classmethod
    def from_seed(cls, seed: int, extent_mm: tuple[float, float, float]) -> "PhantomParams":
        """Sample a jittered thorax for a field of view of ``extent_mm``."""
        rng = np.random.Generator(np.random.PCG64(seed))
        esi, elr, eap = (float(e) for e in extent_mm)

        def jit(x, frac=0.08):
            return float(x * (1.0 + rng.uniform(-frac, frac)))

        def off(scale, frac=0.03):
            return float(rng.uniform(-frac, frac) * scale)

        body = Ellipsoid(
            center=(off(esi), off(elr, 0.02), off(eap, 0.02)),
            radii=(jit(0.62 * esi), jit(0.42 * elr), jit(0.30 * eap)),
        )
        bc = body.center
        lung_r = (jit(0.30 * esi), jit(0.14 * elr), jit(0.20 * eap))
        lungs = []
        for side in (-1.0, 1.0):
            lungs.append(Ellipsoid(
                center=(bc[0] - 0.06 * esi + off(esi), bc[1] + side * 0.19 * elr + off(elr), bc[2] + off(eap)),
                radii=(lung_r[0], jit(lung_r[1], 0.05), lung_r[2]),
            ))
        heart = Ellipsoid(
            center=(bc[0] + 0.10 * esi + off(esi), bc[1] - 0.05 * elr + off(elr), bc[2] - 0.10 * eap + off(eap)),
            radii=(jit(0.12 * esi), jit(0.11 * elr), jit(0.10 * eap)),
        )
        spine_center = (bc[1] + off(elr, 0.01), bc[2] + jit(0.16 * eap, 0.05))
        spine_radius = jit(0.055 * min(elr, eap))
        n_ribs = int(rng.integers(3, 5))
        top = bc[0] - 0.32 * esi
        gap = 0.16 * esi
        rib_levels = tuple(top + r * gap + off(esi, 0.01) for r in range(n_ribs))
        rib_thickness = jit(0.035 * esi)
        rib_shell = (0.80 + off(1.0, 0.02), 0.94 + off(1.0, 0.01))
        hu = {k: float(v * (1.0 + rng.uniform(-HU_JITTER, HU_JITTER))) for k, v in DEFAULT_HU.items()}
        return cls(seed, body, (lungs[0], lungs[1]), heart, spine_center, spine_radius,
                   rib_levels, rib_thickness, rib_shell, hu)


def _grid(dims, spacing):
    axes = [(np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _inside(e: Ellipsoid, si, lr, ap):
    return (((si - e.center[0]) / e.radii[0]) ** 2
            + ((lr - e.center[1]) / e.radii[1]) ** 2
            + ((ap - e.center[2]) / e.radii[2]) ** 2) <= 1.0


def generate_phantom(params: PhantomParams, dims=(32, 32, 32), spacing=(10.0, 10.0, 10.0)):
    """Rasterise a thorax-like phantom.

    Returns ``(Volume[HU], LabelMap)``. The result is a pure function of the
    arguments; background voxels are exactly -1000 HU.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"phantom dims must each be >= 16, got {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")

    si, lr, ap = _grid(dims, spacing)
    labels = np.zeros(dims, dtype=np.uint8)

    body = _inside(params.body, si, lr, ap)
    labels[body] = Label.BODY
    for lung in params.lungs:
        labels[body & _inside(lung, si, lr, ap)] = Label.LUNG
    labels[body & _inside(params.heart, si, lr, ap)] = Label.HEART

    # ribs: thin bands on an elliptical shell following the body outline
    b = params.body
    rho = np.sqrt(((lr - b.center[1]) / b.radii[1]) ** 2 + ((ap - b.center[2]) / b.radii[2]) ** 2)
    shell = body & (rho >= params.rib_shell[0]) & (rho <= params.rib_shell[1])
    for level in params.rib_levels:
        labels[shell & (np.abs(si - level) <= params.rib_thickness / 2.0)] = Label.RIB

    slr, sap = params.spine_center
    spine = body & (((lr - slr) ** 2 + (ap - sap) ** 2) <= params.spine_radius ** 2)
    labels[spine] = Label.SPINE

    hu = np.full(dims, AIR_HU, dtype=np.float32)
    for name, lbl in (("body", Label.BODY), ("lung", Label.LUNG), ("heart", Label.HEART),
                      ("rib", Label.RIB), ("spine", Label.SPINE)):
        hu[labels == lbl] = params.hu[name]
    return Volume(hu, tuple(spacing), Unit.HU), LabelMap(labels)


def normalize_hu(v: Volume, window=(-1000.0, 1000.0)) -> Volume:
    """Map HU linearly onto [-1, 1] with clamping outside ``window``."""
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    if v.unit is not Unit.HU:
        raise ValueError(f"expected an HU volume, got {v.unit.name}")
    x = v.values
    out = np.clip((x - lo) / (hi - lo), 0.0, 1.0) * 2.0 - 1.0
    return v.with_values(out.astype(x.dtype, copy=False), Unit.NORMALIZED)


def volume_hash(v: Volume) -> str:
    """SHA-256 over dims, spacing, unit and little-endian payload."""
    h = hashlib.sha256()
    h.update(struct.pack("<3I3fB", *v.dims, *v.spacing, int(v.unit)))
    h.update(np.ascontiguousarray(v.values.astype(v.values.dtype.newbyteorder("<"))).tobytes())
    return h.hexdigest()


def _dtype_code(arr: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("="):
            return code
    raise VolumeFormatError(f"unsupported dtype {arr.dtype}")


def save_volume(v: Volume, path) -> None:
    """Write ``v`` as XVOL: little-endian header then payload with i fastest."""
    code = _dtype_code(v.values)
    header = _XVOL_HEADER.pack(_XVOL_MAGIC, _XVOL_VERSION, *v.dims, *v.spacing, int(v.unit), code)
    payload = v.values.astype(_DTYPES[code], copy=False).tobytes(order="F")
    Path(path).write_bytes(header + payload)


def _parse_header(data: bytes, magic: bytes, struct_: struct.Struct):
    if len(data) < struct_.size:
        raise VolumeFormatError("file shorter than header")
    fields = struct_.unpack_from(data)
    if fields[0] != magic:
        raise VolumeFormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    return fields


def load_volume(path) -> Volume:
    data = Path(path).read_bytes()
    _, version, h, w, d, sx, sy, sz, unit, code = _parse_header(data, _XVOL_MAGIC, _XVOL_HEADER)
    if version != _XVOL_VERSION:
        raise VolumeFormatError(f"unsupported XVOL version {version}")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype code {code}")
    try:
        unit = Unit(unit)
    except ValueError:
        raise VolumeFormatError(f"unknown unit code {unit}") from None
    if min(h, w, d) < 1:
        raise VolumeFormatError(f"corrupt header: dims {(h, w, d)}")
    dt = _DTYPES[code]
    payload = data[_XVOL_HEADER.size:]
    expected = h * w * d * dt.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"dims/payload mismatch: dims {(h, w, d)} need {expected} bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype=dt).reshape((h, w, d), order="F")
    values = values.astype(dt.newbyteorder("="))
    return Volume(np.ascontiguousarray(values), (sx, sy, sz), unit)

