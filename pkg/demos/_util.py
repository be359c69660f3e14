"""Small helpers shared by the demo scripts."""

from pathlib import Path

import numpy as np

OUT = Path(__file__).parent / "output"


def outdir(name: str) -> Path:
    d = OUT / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def tile(images, cols: int, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Arrange equal-size grayscale images into a grid."""
    images = [np.asarray(im) for im in images]
    h, w = images[0].shape
    rows = (len(images) + cols - 1) // cols
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        canvas[y:y + h, x:x + w] = im
    return np.clip(canvas, 0.0, 1.0)
