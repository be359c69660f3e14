"""Gaze-guided hypothesis generation and best-hypothesis selection.

A binary attention mask is applied to every image of the matching disease bag;
each masked candidate is scored by mean cosine similarity between its
embedding and the bag's embeddings, and the best-scoring candidate becomes the
gaze-guided control.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .gaze import BinaryMask


@dataclass
class DiseaseBag:
    """Label -> list of grayscale images sharing extents."""

    entries: dict

    def __post_init__(self):
        if not self.entries:
            raise ValueError("disease bag is empty")
        shapes = set()
        for label, images in self.entries.items():
            if len(images) == 0:
                raise ValueError(f"bag entry {label!r} has no images")
            for img in images:
                shapes.add(np.asarray(img).shape)
        if len(shapes) != 1:
            raise ValueError(f"bag images disagree on extents: {sorted(shapes)}")

    @property
    def labels(self):
        return list(self.entries)

    def images(self, label):
        if label not in self.entries:
            raise KeyError(f"label {label!r} not in bag (has {self.labels})")
        return self.entries[label]


@dataclass
class Hypothesis:
    """A bag image masked to the attention region, with its similarity score."""

    image: np.ndarray
    source_index: int
    label: str
    score: float | None = None


def apply_mask(image, mask: BinaryMask) -> np.ndarray:
    """Keep pixels where the mask is 255, zero elsewhere (bitwise-AND analogue)."""
    img = np.asarray(image, dtype=np.float32)
    if img.shape != mask.grid.shape:
        raise ValueError(f"extent mismatch: image {img.shape} vs mask {mask.grid.shape}")
    return np.where(mask.grid == 255, img, 0.0).astype(np.float32)


def embed(image, extractor) -> np.ndarray:
    """Unit-normalized feature vector of one image via the extractor."""
    return extractor.embed(np.asarray(image)[None, None, :, :])[0]


def score_hypothesis(hyp: Hypothesis, bag: DiseaseBag, extractor) -> float:
    """Mean cosine similarity between the hypothesis and its label's bag."""
    bag_images = bag.images(hyp.label)
    f_h = embed(hyp.image, extractor)
    f_bag = extractor.embed(np.stack([np.asarray(im) for im in bag_images])[:, None])
    return float((f_bag @ f_h).mean())


def select_best(mask: BinaryMask, bag: DiseaseBag, label: str, extractor) -> Hypothesis:
    """Mask every same-label bag image, return the best-scoring hypothesis.

    Only bag entries of the requested label are candidates (the mask's disease
    label must match the bag label). Ties break toward the lowest index.
    """
    candidates = bag.images(label)
    f_bag = extractor.embed(np.stack([np.asarray(im) for im in candidates])[:, None])
    best = None
    for j, img in enumerate(candidates):
        masked = apply_mask(img, mask)
        f_h = embed(masked, extractor)
        score = float((f_bag @ f_h).mean())
        if best is None or score > best.score:
            best = Hypothesis(masked, j, label, score)
    return best


def save_hypothesis(stem, hyp: Hypothesis):
    """PNG image plus a JSON sidecar recording (index, label, score)."""
    stem = Path(stem)
    pngio.save_image(stem.with_suffix(".png"), np.clip(hyp.image, 0.0, 1.0))
    sidecar = {"source_index": hyp.source_index, "label": hyp.label,
               "score": None if hyp.score is None else float(hyp.score)}
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_hypothesis(stem) -> Hypothesis:
    stem = Path(stem)
    image = pngio.load_image(stem.with_suffix(".png"))
    meta = json.loads(stem.with_suffix(".json").read_text())
    return Hypothesis(image, int(meta["source_index"]), meta["label"],
                      meta.get("score"))
