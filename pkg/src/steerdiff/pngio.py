"""Grayscale PNG reading and writing (8-bit masks, 16-bit value maps).

Maps with values in [0,1] are stored as 16-bit PNGs (value = round(65535*v));
binary masks as 8-bit {0,255}. Written bytes are deterministic for identical
inputs, which the reproducibility contracts rely on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_map16(path, values: np.ndarray):
    """Write a [0,1] float grid as a 16-bit grayscale PNG."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {v.shape}")
    if v.size and (v.min() < -1e-9 or v.max() > 1 + 1e-9):
        raise ValueError(f"values outside [0,1]: min={v.min():.4g}, max={v.max():.4g}")
    q = np.round(np.clip(v, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def load_map16(path) -> np.ndarray:
    """Read a 16-bit (or 8-bit) grayscale PNG back into a [0,1] float grid."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a grayscale PNG, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32) / 65535.0


def save_mask(path, mask: np.ndarray):
    """Write a {0,255} grid as an 8-bit grayscale PNG."""
    m = np.asarray(mask)
    bad = sorted(set(np.unique(m)) - {0, 255})
    if bad:
        raise ValueError(f"mask contains non-binary values {bad[:8]}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(m.astype(np.uint8)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Read an 8-bit {0,255} mask PNG; rejects non-binary content."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a grayscale mask, got shape {arr.shape}")
    bad = sorted(set(np.unique(arr)) - {0, 255})
    if bad:
        raise ValueError(f"{path}: mask contains non-binary values {bad[:8]}")
    return arr.astype(np.uint8)


def save_image(path, image: np.ndarray):
    """Write a [0,1] image as a 16-bit grayscale PNG."""
    save_map16(path, image)


def load_image(path) -> np.ndarray:
    return load_map16(path)
