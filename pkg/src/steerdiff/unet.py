"""A small conditional U-Net that predicts the noise added to an image.

Conditioning enters two ways: a sinusoidal timestep embedding summed with a
learned label-token embedding (projected to the same width), and optional
per-level residual tensors that control adapters add to the decoder's skip
connections and to the bottleneck output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class NetworkSpec:
    """Architecture description for the denoiser and its trainable copies."""

    levels: int = 3
    channels: tuple = (16, 32, 48)
    time_width: int = 64
    token_width: int = 64
    token_count: int = 3
    t_max: int = 200
    in_channels: int = 1
    groups: int = 8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.levels < 2:
            raise ValueError(f"need at least 2 resolution levels, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ValueError(
                f"channels {self.channels} must list one width per level ({self.levels})")
        if min(self.channels) <= 0 or self.time_width <= 0 or self.token_width <= 0:
            raise ValueError("all widths must be positive")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"channel width {c} not divisible by {self.groups} norm groups")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels, "channels": list(self.channels),
            "time_width": self.time_width, "token_width": self.token_width,
            "token_count": self.token_count, "t_max": self.t_max,
            "in_channels": self.in_channels, "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{k: tuple(v) if k == "channels" else v for k, v in d.items()})


def sinusoidal_features(t, width: int, dtype=np.float32):
    """Classic sin/cos positional features of integer timesteps, shape [N, width]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < width:
        feats = np.pad(feats, ((0, 0), (0, width - feats.shape[1])))
    return feats.astype(dtype)


class ConditionEmbedding(nn.Module):
    """Maps (timestep, label token) to the shared conditioning vector."""

    def __init__(self, spec: NetworkSpec, rng, dtype=np.float32):
        self.width = spec.time_width
        self.lin1 = nn.Linear(spec.time_width, spec.time_width, rng=rng, dtype=dtype)
        self.lin2 = nn.Linear(spec.time_width, spec.time_width, rng=rng, dtype=dtype)
        self.token_table = nn.Embedding(spec.token_count, spec.token_width, rng=rng, dtype=dtype)
        self.token_proj = nn.Linear(spec.token_width, spec.time_width, rng=rng, dtype=dtype)
        self.dtype = dtype

    def __call__(self, t, token) -> Tensor:
        feats = Tensor(sinusoidal_features(t, self.width, self.dtype))
        emb = self.lin2(ad.silu(self.lin1(feats)))
        tok = self.token_proj(self.token_table(np.asarray(token)))
        return ad.add(emb, tok)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_width, groups, rng, dtype=np.float32):
        self.norm1 = nn.GroupNorm(in_ch, groups, dtype=dtype)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.emb_lin = nn.Linear(emb_width, out_ch, rng=rng, dtype=dtype)
        self.norm2 = nn.GroupNorm(out_ch, groups, dtype=dtype)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.skip = None if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1, pad=0, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        e = self.emb_lin(ad.silu(emb))
        n, c = e.shape
        h = ad.add(h, e.reshape(n, c, 1, 1))
        h = self.conv2(ad.silu(self.norm2(h)))
        return ad.add(h, x if self.skip is None else self.skip(x))


class UNet(nn.Module):
    """Noise predictor; ``trained`` is flipped by the training loop / loader."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        ch = spec.channels
        L = spec.levels
        self.spec = spec
        self.trained = False
        self.cond = ConditionEmbedding(spec, rng, dtype)
        self.stem = nn.Conv2d(spec.in_channels, ch[0], 3, rng=rng, dtype=dtype)
        self.enc = nn.ModuleList(
            ResBlock(ch[l], ch[l], spec.time_width, spec.groups, rng, dtype) for l in range(L))
        self.down = nn.ModuleList(
            nn.Conv2d(ch[l], ch[l + 1], 3, stride=2, rng=rng, dtype=dtype) for l in range(L - 1))
        self.mid1 = ResBlock(ch[-1], ch[-1], spec.time_width, spec.groups, rng, dtype)
        self.mid2 = ResBlock(ch[-1], ch[-1], spec.time_width, spec.groups, rng, dtype)
        self.dec = nn.ModuleList(
            ResBlock(2 * ch[l], ch[l], spec.time_width, spec.groups, rng, dtype) for l in range(L))
        self.up = nn.ModuleList(
            nn.Conv2d(ch[l], ch[l - 1], 3, rng=rng, dtype=dtype) for l in range(1, L))
        self.head_norm = nn.GroupNorm(ch[0], spec.groups, dtype=dtype)
        self.head = nn.Conv2d(ch[0], spec.in_channels, 3, zero_init=True, dtype=dtype)

    def encoder_names(self):
        """Parameter names of the blocks a control adapter clones."""
        keep = ("cond.", "stem.", "enc.", "down.", "mid1.", "mid2.")
        return [n for n, _ in self.named_parameters() if n.startswith(keep)]

    def residual_shapes(self, n, h, w):
        """Expected shapes of the L+1 injected residuals for an [n,?,h,w] input."""
        ch = self.spec.channels
        shapes = [(n, ch[l], h >> l, w >> l) for l in range(self.spec.levels)]
        shapes.append((n, ch[-1], h >> (self.spec.levels - 1), w >> (self.spec.levels - 1)))
        return shapes

    def _check_input(self, x: Tensor, t, residuals):
        n, c, h, w = x.shape
        L = self.spec.levels
        div = 1 << (L - 1)
        if c != self.spec.in_channels:
            raise ad.ShapeError(f"input has {c} channels, spec expects {self.spec.in_channels}")
        if h % div or w % div:
            raise ad.ShapeError(
                f"spatial extents {h}x{w} not divisible by 2^(levels-1)={div}")
        t = np.asarray(t).reshape(-1)
        if t.size not in (1, n):
            raise ad.ShapeError(f"timestep count {t.size} does not match batch {n}")
        if t.min() < 1 or t.max() > self.spec.t_max:
            raise ValueError(
                f"timestep outside schedule range [1, {self.spec.t_max}]: got {t.min()}..{t.max()}")
        if residuals is not None:
            want = self.residual_shapes(n, h, w)
            if len(residuals) != len(want):
                raise ad.ShapeError(
                    f"expected {len(want)} control residuals (levels+mid), got {len(residuals)}")
            for i, (r, s) in enumerate(zip(residuals, want)):
                if tuple(r.shape) != s:
                    raise ad.ShapeError(f"residual {i} has shape {tuple(r.shape)}, expected {s}")

    def __call__(self, x: Tensor, t, token, residuals=None) -> Tensor:
        """Predict the injected noise for x_t at timestep t under the token.

        ``residuals`` is an optional list of levels+1 tensors added to the
        decoder skip inputs (index = level) and the bottleneck output (last).
        """
        self._check_input(x, t, residuals)
        n = x.shape[0]
        t = np.asarray(t).reshape(-1)
        if t.size == 1:
            t = np.full(n, int(t[0]))
        token = np.asarray(token).reshape(-1)
        if token.size == 1:
            token = np.full(n, int(token[0]))
        emb = self.cond(t, token)

        L = self.spec.levels
        h = self.stem(x)
        skips = []
        for l in range(L):
            h = self.enc[l](h, emb)
            skips.append(h)
            if l < L - 1:
                h = self.down[l](h)
        h = self.mid1(h, emb)
        h = self.mid2(h, emb)
        if residuals is not None:
            h = ad.add(h, residuals[L])
        for l in reversed(range(L)):
            s = skips[l]
            if residuals is not None:
                s = ad.add(s, residuals[l])
            h = self.dec[l](ad.concat([h, s], axis=1), emb)
            if l > 0:
                h = self.up[l - 1](ad.upsample_nearest2(h))
        return self.head(ad.silu(self.head_norm(h)))
