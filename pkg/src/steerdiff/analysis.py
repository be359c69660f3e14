"""Measurement helpers for generated images: lesion-blob localization and
bright-region extraction.

These read generated phantoms back into geometry (where did the lesion land,
where are the lungs) so control adherence can be scored against the supplied
control masks.
"""

from __future__ import annotations

import numpy as np

from .filters import gaussian_blur


def otsu_threshold(image: np.ndarray) -> float:
    """Classic two-class variance-maximizing threshold on a [0,1] image."""
    img = np.asarray(image, dtype=np.float64).ravel()
    hist, edges = np.histogram(img, bins=128, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2.0
    total = hist.sum()
    if total == 0:
        return 0.5
    w0 = np.cumsum(hist)
    w1 = total - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(centers)
    between[valid] = (mt * w0[valid] / total - m0[valid]) ** 2 \
        / (w0[valid] / total * w1[valid] / total) / total ** 2
    return float(centers[np.argmax(between)])


def bright_region_mask(image: np.ndarray) -> np.ndarray:
    """Boolean mask of the image's bright structures via Otsu thresholding."""
    img = np.asarray(image, dtype=np.float64)
    return img > otsu_threshold(img)


def connected_component(mask: np.ndarray, seed_yx) -> np.ndarray:
    """8-connected component of ``mask`` containing the seed pixel."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    sy, sx = seed_yx
    if not mask[sy, sx]:
        return out
    stack = [(int(sy), int(sx))]
    out[sy, sx] = True
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    stack.append((ny, nx))
    return out


def dominant_blob_centroid(image: np.ndarray, smooth_sigma: float = 5.0):
    """Centroid (x, y) of the brightest compact blob above the local baseline.

    Subtracts a wide Gaussian baseline, finds the global residual peak, grows
    the 8-connected region above half the peak residual, and returns that
    region's intensity-weighted centroid. Returns None for images with no
    positive residual (nothing blob-like).
    """
    img = np.asarray(image, dtype=np.float64)
    residual = img - gaussian_blur(img, smooth_sigma)
    peak = residual.max()
    if peak <= 0:
        return None
    py, px = np.unravel_index(np.argmax(residual), residual.shape)
    region = connected_component(residual >= 0.5 * peak, (py, px))
    weights = np.where(region, residual, 0.0)
    total = weights.sum()
    ys, xs = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    cy = float((ys * weights).sum() / total)
    cx = float((xs * weights).sum() / total)
    return cx, cy
