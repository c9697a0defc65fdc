"""8-bit image export for volume slices and radiographs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max (or fixed window) scale a 2D array to uint8."""
    img = np.asarray(img, dtype=np.float64)
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_pgm(img: np.ndarray, path, lo=None, hi=None) -> None:
    data = to_uint8(img, lo, hi)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def save_png(img: np.ndarray, path, lo=None, hi=None) -> None:
    Image.fromarray(to_uint8(img, lo, hi), mode="L").save(path)


def save_image(img: np.ndarray, path, lo=None, hi=None) -> None:
    if str(path).lower().endswith(".pgm"):
        save_pgm(img, path, lo, hi)
    else:
        save_png(img, path, lo, hi)


def center_slices(values: np.ndarray) -> dict[str, np.ndarray]:
    """Transverse, sagittal and coronal centre slices of an (SI, LR, AP) grid."""
    H, W, D = values.shape
    return {
        "transverse": values[H // 2, :, :].T,  # rows AP, cols LR
        "sagittal": values[:, W // 2, :],  # rows SI, cols AP
        "coronal": values[:, :, D // 2],  # rows SI, cols LR
    }


def save_center_slices(values: np.ndarray, prefix, lo=-1.0, hi=1.0) -> list[Path]:
    paths = []
    for plane, img in center_slices(values).items():
        p = Path(f"{prefix}_{plane}.png")
        save_png(img, p, lo, hi)
        paths.append(p)
    return paths
