"""Gaze fixations to attention heatmaps and binary attention masks.

A fixation sequence is splatted as duration-weighted Gaussians, peak-normalized
to [0,1], then thresholded at a fraction of its peak to make a binary mask that
localizes what the reader dwelt on.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import pngio

CSV_HEADER = ("x", "y", "duration_ms")


@dataclass
class Fixation:
    x: float
    y: float
    duration_ms: float


@dataclass
class FixationSequence:
    fixations: list
    source_width: int
    source_height: int

    def __post_init__(self):
        if self.source_width <= 0 or self.source_height <= 0:
            raise ValueError(
                f"source extents must be positive, got {self.source_width}x{self.source_height}")
        for f in self.fixations:
            if not (0 <= f.x < self.source_width and 0 <= f.y < self.source_height):
                raise ValueError(f"fixation ({f.x}, {f.y}) outside {self.source_width}x{self.source_height}")
            if f.duration_ms <= 0:
                raise ValueError(f"fixation duration must be positive, got {f.duration_ms}")

    def __len__(self):
        return len(self.fixations)

    def total_duration(self) -> float:
        return sum(f.duration_ms for f in self.fixations)


@dataclass
class HvaMap:
    """Continuous attention heatmap; peak is exactly 1 unless empty."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {self.grid.shape}")
        if self.grid.size and (self.grid.min() < 0 or self.grid.max() > 1.0):
            raise ValueError("heatmap values must lie in [0,1]")

    @property
    def height(self):
        return self.grid.shape[0]

    @property
    def width(self):
        return self.grid.shape[1]


@dataclass
class BinaryMask:
    """A {0,255} uint8 grid with the extents of its source map."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        bad = sorted(set(np.unique(self.grid)) - {0, 255})
        if bad:
            raise ValueError(f"mask contains non-binary values {bad[:8]}")
        self.grid = self.grid.astype(np.uint8)

    @property
    def height(self):
        return self.grid.shape[0]

    @property
    def width(self):
        return self.grid.shape[1]

    def as_bool(self) -> np.ndarray:
        return self.grid == 255


def parse_fixations(stream, source_width: int, source_height: int):
    """Parse `x,y,duration_ms` CSV rows into a FixationSequence.

    Out-of-bounds coordinates are clamped into the source extents; the number
    of clamped rows comes back as the warning count. Malformed rows raise with
    their 1-based row number.
    """
    if isinstance(stream, (str, bytes)):
        stream = io.StringIO(stream.decode() if isinstance(stream, bytes) else stream)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("fixation CSV is empty (missing header row)") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise ValueError(f"row 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")

    fixations = []
    warnings = 0
    for rownum, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise ValueError(f"row {rownum}: expected 3 fields, got {len(row)}")
        try:
            x, y, dur = (float(v) for v in row)
        except ValueError:
            raise ValueError(f"row {rownum}: non-numeric field in {row}") from None
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(dur)):
            raise ValueError(f"row {rownum}: non-finite value in {row}")
        if dur <= 0:
            raise ValueError(f"row {rownum}: duration must be positive, got {dur}")
        cx = min(max(x, 0.0), source_width - 1.0)
        cy = min(max(y, 0.0), source_height - 1.0)
        if cx != x or cy != y:
            warnings += 1
        fixations.append(Fixation(cx, cy, dur))
    return FixationSequence(fixations, source_width, source_height), warnings


def write_fixations(path, fix: FixationSequence):
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for fx in fix.fixations:
            w.writerow([f"{fx.x:.4f}", f"{fx.y:.4f}", f"{fx.duration_ms:.4f}"])


def read_fixations(path, source_width: int, source_height: int):
    with open(path, newline="") as f:
        return parse_fixations(f, source_width, source_height)


def compute_hva(fix: FixationSequence, out_width: int, out_height: int, sigma: float,
                duration_weighting: bool = True) -> HvaMap:
    """Splat fixations as Gaussians of scale ``sigma`` (in output pixels).

    Fixation coordinates are rescaled from the source extents to the output
    grid; each contributes duration * exp(-d^2 / (2 sigma^2)) (or weight 1 when
    duration weighting is off). The sum is peak-normalized so max = 1; an
    empty sequence gives an all-zero map.
    """
    if out_width <= 0 or out_height <= 0:
        raise ValueError(f"output extents must be positive, got {out_width}x{out_height}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    grid = np.zeros((out_height, out_width), dtype=np.float64)
    if len(fix) == 0:
        return HvaMap(grid.astype(np.float32))
    sx = out_width / fix.source_width
    sy = out_height / fix.source_height
    ys = np.arange(out_height, dtype=np.float64)[:, None]
    xs = np.arange(out_width, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    for f in fix.fixations:
        w = f.duration_ms if duration_weighting else 1.0
        d2 = (xs - f.x * sx) ** 2 + (ys - f.y * sy) ** 2
        grid += w * np.exp(-d2 * inv)
    grid /= grid.max()
    return HvaMap(grid.astype(np.float32))


def threshold_hva(v: HvaMap, lam: float, absolute: bool = False) -> BinaryMask:
    """Mask pixels where the map meets the threshold (255 inside, 0 outside).

    By default ``lam`` is a fraction of the map's peak in [0,1]; with
    ``absolute=True`` it is compared against raw map values instead. An
    all-zero map always yields an all-zero mask.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0,1], got {lam}")
    grid = v.grid
    peak = float(grid.max()) if grid.size else 0.0
    if peak <= 0.0:
        return BinaryMask(np.zeros_like(grid, dtype=np.uint8))
    cut = lam if absolute else lam * peak
    return BinaryMask(np.where(grid >= cut, 255, 0).astype(np.uint8))


def save_hva(path, v: HvaMap):
    """16-bit PNG, value = round(65535 * V)."""
    pngio.save_map16(path, v.grid)


def load_hva(path) -> HvaMap:
    return HvaMap(pngio.load_map16(path))


def save_mask(path, m: BinaryMask):
    pngio.save_mask(path, m.grid)


def load_mask(path) -> BinaryMask:
    return BinaryMask(pngio.load_mask(path))
