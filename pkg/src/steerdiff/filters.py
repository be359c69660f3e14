"""Deterministic image-filter control maps and the canonical control stack.

Four filter kinds (canny, sobel, log, segmentation) plus the two gaze-derived
kinds (hva, hypothesis) share one fixed channel order, so a missing kind is an
all-zero channel and one trained adapter serves every control subset.

All filters use replicate border handling and rescale by the global maximum,
so outputs live in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pngio

CONTROL_KINDS = ("canny", "sobel", "log", "segmentation", "hva", "hypothesis")
KIND_ALIASES = {"seg": "segmentation", "laplacian": "log"}
RADIOMIC_KINDS = ("canny", "sobel", "log", "segmentation")


def canonical_kind(kind: str) -> str:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in CONTROL_KINDS:
        raise ValueError(f"unknown control kind {kind!r}; expected one of {CONTROL_KINDS}")
    return kind


@dataclass
class ControlMap:
    """One filter response in [0,1] with its kind recorded for provenance."""

    grid: np.ndarray
    kind: str

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError(f"control map must be 2-D, got shape {self.grid.shape}")
        if self.grid.size and (self.grid.min() < 0 or self.grid.max() > 1.0 + 1e-6):
            raise ValueError(
                f"{self.kind} map values outside [0,1]: "
                f"min={self.grid.min():.4g}, max={self.grid.max():.4g}")

    @property
    def height(self):
        return self.grid.shape[0]

    @property
    def width(self):
        return self.grid.shape[1]


@dataclass
class ControlStack:
    """Channel-stacked controls in the canonical kind order."""

    channels: np.ndarray  # [len(CONTROL_KINDS), H, W]
    present: tuple        # kinds that were actually supplied

    def array(self) -> np.ndarray:
        return self.channels

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]


def stack_controls(maps) -> ControlStack:
    """Assemble control maps into the canonical stack.

    Input order is irrelevant; duplicate kinds and extent mismatches are
    rejected, absent kinds become all-zero channels.
    """
    maps = list(maps)
    seen = {}
    for m in maps:
        if m.kind in seen:
            raise ValueError(f"duplicate control kind {m.kind!r}")
        seen[m.kind] = m
    shapes = {m.grid.shape for m in maps}
    if len(shapes) > 1:
        raise ValueError(f"control maps disagree on extents: {sorted(shapes)}")
    if not maps:
        raise ValueError("stack_controls needs at least one map")
    h, w = maps[0].grid.shape
    channels = np.zeros((len(CONTROL_KINDS), h, w), dtype=np.float32)
    for i, kind in enumerate(CONTROL_KINDS):
        if kind in seen:
            channels[i] = seen[kind].grid
    return ControlStack(channels, tuple(k for k in CONTROL_KINDS if k in seen))


# ---------------------------------------------------------------------------
# primitive convolutions (replicate border)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def correlate2d_replicate(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Dense 2-D cross-correlation with edge-replicated borders."""
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    p = np.pad(np.asarray(image, dtype=np.float64), ((ry, ry), (rx, rx)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (kh, kw))
    return np.einsum("ijkl,kl->ij", win, kernel)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3*sigma)."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with replicate borders."""
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    img = np.asarray(image, dtype=np.float64)
    p = np.pad(img, ((r, r), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, tap in enumerate(k):
        out += tap * p[i:i + img.shape[0], :]
    p = np.pad(out, ((0, 0), (r, r)), mode="edge")
    out2 = np.zeros_like(img)
    for i, tap in enumerate(k):
        out2 += tap * p[:, i:i + img.shape[1]]
    return out2


# ---------------------------------------------------------------------------
# filters


def sobel(image: np.ndarray) -> ControlMap:
    """Gradient magnitude sqrt(Gx^2 + Gy^2), rescaled by its global max."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"sobel needs a 2-D image of at least 3x3, got shape {img.shape}")
    gx = correlate2d_replicate(img, SOBEL_X)
    gy = correlate2d_replicate(img, SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    return ControlMap(mag, "sobel")


def log_filter(image: np.ndarray, sigma: float = 2.0) -> ControlMap:
    """Absolute Laplacian-of-Gaussian response, rescaled by its global max.

    The kernel samples (x^2 + y^2 - 2 sigma^2)/sigma^4 * exp(-(x^2+y^2)/(2 sigma^2))
    on a grid of radius ceil(3*sigma) and is shifted to sum to zero, so flat and
    affine regions respond exactly zero.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    img = np.asarray(image, dtype=np.float64)
    k = log_kernel(sigma)
    resp = np.abs(correlate2d_replicate(img, k))
    peak = resp.max()
    # the zero-sum kernel leaves ~1e-16 residue on flat images; don't rescale noise
    if peak > 1e-10:
        resp /= peak
    else:
        resp[:] = 0.0
    return ControlMap(resp, "log")


def log_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    r2 = xx * xx + yy * yy
    k = (r2 - 2.0 * sigma * sigma) / sigma ** 4 * np.exp(-r2 / (2.0 * sigma * sigma))
    return k - k.mean()


# direction bin k covers angles [45k - 22.5, 45k + 22.5) degrees
_NMS_OFFSETS = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]


def _shifted(mag: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Magnitude at p + (dx, dy), zero outside the image."""
    h, w = mag.shape
    out = np.zeros_like(mag)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = mag[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
    return out


def canny(image: np.ndarray, low: float = 0.1, high: float = 0.3,
          blur_sigma: float = 1.4) -> ControlMap:
    """Binary edge map: blur, Sobel, non-maximum suppression, hysteresis.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude.
    Suppression quantizes the gradient direction into 8 bins of 45 degrees and
    keeps a pixel iff its magnitude is >= the down-gradient neighbour and
    strictly > the up-gradient neighbour, which breaks the tie on a symmetric
    step toward the brighter side. Weak edges (>= low) survive only when
    8-connected to a strong edge (>= high).
    """
    if not (0.0 <= low <= high <= 1.0):
        raise ValueError(f"need 0 <= low <= high <= 1, got low={low}, high={high}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"canny needs a 2-D image of at least 3x3, got shape {img.shape}")
    smooth = gaussian_blur(img, blur_sigma)
    gx = correlate2d_replicate(smooth, SOBEL_X)
    gy = correlate2d_replicate(smooth, SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return ControlMap(np.zeros_like(mag), "canny")

    theta = np.degrees(np.arctan2(gy, gx)) % 360.0
    bins = np.floor((theta + 22.5) / 45.0).astype(int) % 8
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dx, dy) in enumerate(_NMS_OFFSETS):
        sel = bins == b
        if not sel.any():
            continue
        ahead = _shifted(mag, dx, dy)     # up-gradient: toward the brighter side
        behind = _shifted(mag, -dx, -dy)  # down-gradient
        keep |= sel & (mag >= behind) & (mag > ahead)

    strong = keep & (mag >= high * peak)
    weak = keep & (mag >= low * peak)
    edges = strong.copy()
    frontier = strong
    while frontier.any():
        grown = np.zeros_like(edges)
        for dx, dy in _NMS_OFFSETS:
            grown |= _shifted(frontier.astype(np.float64), dx, dy) > 0
        frontier = grown & weak & ~edges
        edges |= frontier
    return ControlMap(edges.astype(np.float64), "canny")


def load_segmentation(path) -> ControlMap:
    """Read a {0,255} PNG region mask as a {0,1} control map."""
    mask = pngio.load_mask(path)
    return ControlMap(mask.astype(np.float32) / 255.0, "segmentation")


def segmentation_map(mask: np.ndarray) -> ControlMap:
    """Wrap an in-memory {0,255} or boolean mask as a segmentation control."""
    m = np.asarray(mask)
    if m.dtype == bool:
        return ControlMap(m.astype(np.float32), "segmentation")
    bad = sorted(set(np.unique(m)) - {0, 255})
    if bad:
        raise ValueError(f"segmentation mask contains non-binary values {bad[:8]}")
    return ControlMap(m.astype(np.float32) / 255.0, "segmentation")
