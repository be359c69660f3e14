"""Image and distribution metrics: SSIM, PSNR, mask overlap, Frechet distance
between Gaussian feature fits, and an embedding-similarity score.

The Frechet metric's feature extractor is pluggable; at desk scale it is the
toy classifier's penultimate layer, so absolute values are NOT comparable to
any published numbers computed with pretrained-network features. Relative
comparisons within one feature space are the supported use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0


def _as_image(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D grayscale grid, got shape {arr.shape}")
    return arr


def ssim(a, b) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Uses k1=0.01, k2=0.03 and dynamic range 1.0 (images in [0,1]); the mean is
    taken over all fully valid window positions.
    """
    a = _as_image(a, "a")
    b = _as_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < 11:
        raise ValueError(f"ssim needs extents >= 11x11, got {a.shape}")
    half = 5
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs * xs) / (2 * 1.5 * 1.5))
    w = np.outer(g, g)
    w /= w.sum()

    def local(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (11, 11))
        return np.einsum("ijkl,kl->ij", win, w)

    mu_a = local(a)
    mu_b = local(b)
    aa = local(a * a) - mu_a * mu_a
    bb = local(b * b) - mu_b * mu_b
    ab = local(a * b) - mu_a * mu_b
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2)
    return float((num / den).mean())


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB for [0,1] images, capped at 100 dB.

    Identical inputs return the 100 dB sentinel rather than infinity.
    """
    a = _as_image(a, "a")
    b = _as_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def miou(a, b) -> float:
    """Mean IoU over {foreground, background}; an empty union scores 1."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    fa = a.astype(bool) if a.dtype == bool else (a > 0)
    fb = b.astype(bool) if b.dtype == bool else (b > 0)
    scores = []
    for ma, mb in ((fa, fb), (~fa, ~fb)):
        union = (ma | mb).sum()
        scores.append(1.0 if union == 0 else (ma & mb).sum() / union)
    return float(np.mean(scores))


@dataclass
class FeatureCloud:
    """An n x d matrix of embeddings with enough rows to fit a covariance."""

    vectors: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"feature cloud must be n x d, got shape {self.vectors.shape}")
        n, d = self.vectors.shape
        if n < d + 1:
            raise ValueError(f"need n >= d+1 rows for covariance fitting; got n={n}, d={d}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature cloud contains non-finite entries")

    @property
    def dim(self):
        return self.vectors.shape[1]


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping negatives."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: FeatureCloud, b: FeatureCloud) -> float:
    """Frechet distance between Gaussian fits of two feature clouds.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the cross term
    computed through the symmetrized product sqrt(Sa) Sb sqrt(Sa) and negative
    eigenvalues clamped to zero. Uses the unbiased (n-1) covariance.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    mu_a = a.vectors.mean(axis=0)
    mu_b = b.vectors.mean(axis=0)
    sa = np.cov(a.vectors, rowvar=False)
    sb = np.cov(b.vectors, rowvar=False)
    root_a = _sqrtm_psd(sa)
    inner = _sqrtm_psd(root_a @ sb @ root_a)
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb)
                  - 2.0 * np.trace(inner))
    if not np.isfinite(value):
        raise ValueError(
            f"non-finite Frechet distance; covariance conditioning: "
            f"trace(Sa)={np.trace(sa):.4g}, trace(Sb)={np.trace(sb):.4g}, "
            f"max|Sa|={np.abs(sa).max():.4g}, max|Sb|={np.abs(sb).max():.4g}")
    return max(value, 0.0)


def embedding_score(generated, reference, extractor) -> float:
    """100 x mean cosine similarity between paired image embeddings."""
    generated = np.asarray(generated)
    reference = np.asarray(reference)
    if len(generated) != len(reference) or len(generated) == 0:
        raise ValueError(
            f"paired sets required: got {len(generated)} generated vs "
            f"{len(reference)} reference images")
    eg = extractor.embed(generated)
    er = extractor.embed(reference)
    cos = (eg * er).sum(axis=1)
    return float(100.0 * cos.mean())
