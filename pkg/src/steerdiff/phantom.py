"""Procedural phantom radiographs: lung fields, class-specific lesions,
ground-truth masks and synthetic gaze.

Each sample is fully determined by (spec, label, seed): a smooth background,
two elliptical bright lung fields with jittered geometry, textured lesion
blobs drawn inside the lungs according to the class parameters, additive
noise, and a fixation sequence that dwells on the lesions (diffuse over the
lungs for "no finding"). Lesion textures are class-specific band-limited
noise so edge/texture filter maps carry class signal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pngio
from .gaze import BinaryMask, Fixation, FixationSequence, read_fixations, write_fixations
from .filters import gaussian_blur
from .seeds import derive_rng, derive_seed

NO_FINDING = "no_finding"


@dataclass
class LesionClass:
    """Lesion appearance parameters for one disease label."""

    name: str
    blob_count: tuple = (1, 2)       # inclusive range
    radius: tuple = (4.0, 6.0)       # pixels at 64x64, scaled with resolution
    contrast: float = 0.30
    texture_freq: float = 0.20       # cycles/pixel; texture sigma = 0.5/freq
    texture_gain: float = 0.55
    anisotropy: float = 1.0          # >1 stretches texture along a random axis


def default_classes():
    return (
        LesionClass(NO_FINDING, blob_count=(0, 0), contrast=0.0, texture_gain=0.0),
        LesionClass("focal", blob_count=(1, 2), radius=(4.0, 6.0), contrast=0.34,
                    texture_freq=0.14, texture_gain=0.5, anisotropy=1.0),
        LesionClass("streak", blob_count=(1, 2), radius=(4.0, 6.5), contrast=0.28,
                    texture_freq=0.5, texture_gain=0.9, anisotropy=4.0),
    )


@dataclass
class PhantomSpec:
    resolution: int = 64
    classes: tuple = field(default_factory=default_classes)
    background: tuple = (0.14, 0.08)   # base level, vertical tilt
    noise: float = 0.015
    lung_level: float = 0.34
    levels: int = 3                    # backbone depth the resolution must divide

    def __post_init__(self):
        self.classes = tuple(self.classes)
        div = 1 << (self.levels - 1)
        if self.resolution % div:
            raise ValueError(
                f"resolution {self.resolution} not divisible by 2^(levels-1)={div}")
        names = [c.name for c in self.classes]
        if len(self.classes) < 2 or NO_FINDING not in names:
            raise ValueError("need at least 2 classes including no_finding")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")

    def class_names(self):
        return [c.name for c in self.classes]

    def class_by_name(self, name: str) -> LesionClass:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(f"unknown class {name!r}; spec has {self.class_names()}")


@dataclass
class LesionRegion:
    cx: float
    cy: float
    radius: float
    label: str


@dataclass
class PhantomSample:
    image: np.ndarray            # [0,1] float32
    lung_mask: BinaryMask
    lesion_regions: list
    label: str
    gaze: FixationSequence
    seed: int

    def lesion_mask(self) -> np.ndarray:
        """Boolean union of the lesion discs."""
        h, w = self.image.shape
        ys, xs = np.mgrid[0:h, 0:w]
        out = np.zeros((h, w), dtype=bool)
        for les in self.lesion_regions:
            out |= (xs - les.cx) ** 2 + (ys - les.cy) ** 2 <= les.radius ** 2
        return out


def _band_noise(rng, shape, sigma_y, sigma_x):
    """Zero-mean unit-std noise band-limited by anisotropic smoothing."""
    w = rng.standard_normal(shape)
    if sigma_y > 0:
        k = np.exp(-np.arange(-int(3 * sigma_y + 1), int(3 * sigma_y + 1) + 1) ** 2
                   / (2 * sigma_y ** 2))
        k /= k.sum()
        w = np.apply_along_axis(lambda col: np.convolve(np.pad(col, len(k) // 2, mode="edge"),
                                                        k, mode="valid"), 0, w)
    if sigma_x > 0:
        k = np.exp(-np.arange(-int(3 * sigma_x + 1), int(3 * sigma_x + 1) + 1) ** 2
                   / (2 * sigma_x ** 2))
        k /= k.sum()
        w = np.apply_along_axis(lambda row: np.convolve(np.pad(row, len(k) // 2, mode="edge"),
                                                        k, mode="valid"), 1, w)
    std = w.std()
    return w / std if std > 0 else w


def _lung_fields(rng, res):
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
    cy = res * (0.52 + rng.uniform(-0.045, 0.045))
    dx = res * (0.22 + rng.uniform(-0.05, 0.05))
    soft = np.zeros((res, res))
    for side in (-1.0, 1.0):
        cx = res / 2 + side * dx + res * rng.uniform(-0.02, 0.02)
        a = res * 0.135 * (1.0 + rng.uniform(-0.22, 0.22))
        b = res * 0.30 * (1.0 + rng.uniform(-0.18, 0.18))
        theta = side * rng.uniform(0.0, 0.18)
        xr = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
        yr = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
        e = (xr / a) ** 2 + (yr / b) ** 2
        arg = np.clip((1.0 - e) / 0.08, -60.0, 60.0)
        soft = np.maximum(soft, 1.0 / (1.0 + np.exp(-arg)))
    return soft


def _interior_candidates(mask, margin):
    """Pixels whose (2*margin+1)^2 neighbourhood lies fully inside the mask."""
    m = int(margin)
    if m <= 0:
        return np.argwhere(mask)
    h, w = mask.shape
    pad = np.pad(mask.astype(np.int64), m)
    sat = np.zeros((h + 2 * m + 1, w + 2 * m + 1), dtype=np.int64)
    sat[1:, 1:] = pad.cumsum(0).cumsum(1)
    size = 2 * m + 1
    ys, xs = np.mgrid[0:h, 0:w]
    window = (sat[ys + size, xs + size] - sat[ys, xs + size]
              - sat[ys + size, xs] + sat[ys, xs])
    return np.argwhere((window == size * size) & mask)


def generate_sample(spec: PhantomSpec, label: str, seed: int) -> PhantomSample:
    """Deterministic phantom image + ground truth for one (label, seed)."""
    cls = spec.class_by_name(label)
    rng = derive_rng(seed, "phantom", label)
    res = spec.resolution
    scale = res / 64.0
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)

    base, tilt = spec.background
    img = base + tilt * (ys / res - 0.5) + rng.uniform(-0.02, 0.02)
    soft = _lung_fields(rng, res)
    img = img + spec.lung_level * soft
    lung = soft > 0.5

    lesions = []
    count = int(rng.integers(cls.blob_count[0], cls.blob_count[1] + 1))
    for _ in range(count):
        r = rng.uniform(cls.radius[0], cls.radius[1]) * scale
        margin = max(1, int(round(r * 0.7)))
        cands = _interior_candidates(lung, margin)
        if len(cands) == 0:
            cands = np.argwhere(lung)
        cy_l, cx_l = cands[int(rng.integers(len(cands)))]
        cy_l = float(cy_l) + rng.uniform(-0.5, 0.5)
        cx_l = float(cx_l) + rng.uniform(-0.5, 0.5)
        sigma_t = 0.5 / cls.texture_freq
        an = np.sqrt(cls.anisotropy)
        sig_y, sig_x = sigma_t / an, sigma_t * an
        if cls.anisotropy != 1.0 and rng.random() < 0.5:
            sig_y, sig_x = sig_x, sig_y
        tex = _band_noise(rng, (res, res), sig_y * scale, sig_x * scale)
        d2 = ((xs - cx_l) ** 2 + (ys - cy_l) ** 2) / (r * r)
        prof = np.exp(-d2 ** 1.5)
        img = img + cls.contrast * prof * (0.55 + cls.texture_gain * tex)
        lesions.append(LesionRegion(cx_l, cy_l, r, label))

    img = img + rng.normal(0.0, spec.noise, (res, res))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    gaze_fix = _synthesize_gaze(rng, res, lung, lesions)
    mask = BinaryMask(np.where(lung, 255, 0).astype(np.uint8))
    return PhantomSample(img, mask, lesions, label, gaze_fix, seed)


def _synthesize_gaze(rng, res, lung, lesions):
    """Fixations dwell on lesions (>=85% of duration) or roam the lungs."""
    lung_pts = np.argwhere(lung)
    fixations = []

    def clampf(v, lo, hi):
        return float(min(max(v, lo), hi))

    if lesions:
        weights = np.array([l.radius ** 2 for l in lesions])
        weights = weights / weights.sum()
        for _ in range(12):
            les = lesions[int(rng.choice(len(lesions), p=weights))]
            dx, dy = rng.normal(0.0, 0.18 * les.radius, 2)
            lim = 0.5 * les.radius
            x = clampf(les.cx + np.clip(dx, -lim, lim), 0, res - 1)
            y = clampf(les.cy + np.clip(dy, -lim, lim), 0, res - 1)
            fixations.append(Fixation(x, y, float(rng.uniform(180, 420))))
        for _ in range(3):
            y, x = lung_pts[int(rng.integers(len(lung_pts)))]
            fixations.append(Fixation(float(x), float(y), float(rng.uniform(30, 70))))
    else:
        for _ in range(12):
            y, x = lung_pts[int(rng.integers(len(lung_pts)))]
            fixations.append(Fixation(float(x), float(y), float(rng.uniform(150, 400))))
    return FixationSequence(fixations, res, res)


# ---------------------------------------------------------------------------
# datasets on disk


def generate_dataset(spec: PhantomSpec, counts, seed: int, outdir) -> Path:
    """Write a dataset (images, masks, gaze CSVs, JSONL manifest) to disk.

    ``counts`` maps class name -> sample count (or lists counts in
    spec.classes order). Returns the manifest path; the manifest plus files
    are bit-identical for identical (spec, counts, seed).
    """
    names = spec.class_names()
    if not isinstance(counts, dict):
        if len(counts) != len(names):
            raise ValueError(f"need {len(names)} counts for classes {names}, got {list(counts)}")
        counts = dict(zip(names, counts))
    unknown = sorted(set(counts) - set(names))
    if unknown:
        raise ValueError(f"counts reference unknown classes {unknown}")
    if any(c < 0 for c in counts.values()):
        raise ValueError(f"counts must be >= 0, got {counts}")

    outdir = Path(outdir)
    for sub in ("images", "masks", "gaze"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)

    records = []
    for label in names:
        for i in range(counts.get(label, 0)):
            sid = f"{label}-{i:05d}"
            sample_seed = derive_seed(seed, "sample", label, i)
            sample = generate_sample(spec, label, sample_seed)
            rec = {
                "id": sid,
                "label": label,
                "label_id": names.index(label),
                "image": f"images/{sid}.png",
                "mask": f"masks/{sid}.png",
                "gaze": f"gaze/{sid}.csv",
                "lesions": [[l.cx, l.cy, l.radius] for l in sample.lesion_regions],
                "seed": sample_seed,
            }
            pngio.save_image(outdir / rec["image"], sample.image)
            pngio.save_mask(outdir / rec["mask"], sample.lung_mask.grid)
            write_fixations(outdir / rec["gaze"], sample.gaze)
            records.append(rec)

    manifest = outdir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {
        "resolution": spec.resolution,
        "classes": names,
        "counts": {k: counts.get(k, 0) for k in names},
        "seed": seed,
        "noise": spec.noise,
    }
    with open(outdir / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return manifest


def read_manifest(manifest_path):
    """Load (records, meta) for a dataset manifest."""
    manifest_path = Path(manifest_path)
    records = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    meta_path = manifest_path.parent / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return records, meta


def load_record_image(manifest_path, rec) -> np.ndarray:
    return pngio.load_image(Path(manifest_path).parent / rec["image"])


def load_record_mask(manifest_path, rec) -> np.ndarray:
    return pngio.load_mask(Path(manifest_path).parent / rec["mask"])


def load_record_gaze(manifest_path, rec, resolution) -> FixationSequence:
    seq, _ = read_fixations(Path(manifest_path).parent / rec["gaze"], resolution, resolution)
    return seq


def dataset_arrays(manifest_path):
    """Stack a manifest into (images [N,1,R,R] in [0,1], label ids [N], meta)."""
    records, meta = read_manifest(manifest_path)
    if not records:
        raise ValueError(f"manifest {manifest_path} is empty")
    imgs = np.stack([load_record_image(manifest_path, r) for r in records])[:, None, :, :]
    labels = np.array([r["label_id"] for r in records], dtype=np.int64)
    return imgs.astype(np.float32), labels, meta


def manifest_checksum(manifest_path) -> str:
    """Digest of the manifest text plus every referenced file's bytes."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    records, _ = read_manifest(manifest_path)
    for rec in records:
        for key in ("image", "mask", "gaze"):
            h.update((manifest_path.parent / rec[key]).read_bytes())
    return h.hexdigest()
