"""Neural-network layers built on the autodiff tensors.

Modules hold their parameters as ``Tensor`` attributes; ``named_parameters``
walks attributes in insertion order, so parameter ordering (and therefore
checkpoints and optimizer state) is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: parameter discovery, freezing, state dicts."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, ModuleList):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ad.ShapeError(
                    f"parameter {name}: stored shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def param_checksum(self) -> str:
        """Hex digest of every parameter's exact bytes, in declaration order."""
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class ModuleList(list):
    """A plain list of modules that named_parameters knows how to walk."""


def _normal(rng: np.random.Generator, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=None, bias=True,
                 rng: np.random.Generator | None = None, dtype=np.float32, zero_init=False):
        if pad is None:
            pad = (kernel - 1) // 2
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * kernel * kernel
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Conv2d needs an rng unless zero_init=True")
            w = _normal(rng, (out_ch, in_ch, kernel, kernel), np.sqrt(2.0 / fan_in), dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, in_dim, out_dim, bias=True, rng=None, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Linear needs an rng unless zero_init=True")
            w = _normal(rng, (in_dim, out_dim), np.sqrt(1.0 / in_dim), dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class GroupNorm(Module):
    """Per-group feature normalization over [N,C,H,W] with affine parameters."""

    def __init__(self, channels, groups=8, eps=1e-5, dtype=np.float32):
        if channels % groups != 0:
            raise ad.ShapeError(f"GroupNorm: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.scale, self.shift, self.groups, self.eps)


class Embedding(Module):
    def __init__(self, count, width, rng=None, dtype=np.float32, std=0.1):
        if rng is None:
            raise ValueError("Embedding needs an rng")
        self.table = Tensor(_normal(rng, (count, width), std, dtype), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.table, ids)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling via reshape+mean (spatial extents must be even)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ad.ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ad.tmax(x.reshape(n, c, h * w), axis=2)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Adam:
    """Adaptive moment estimation over an explicit trainable-parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update from accumulated gradients; returns pre-clip grad norm."""
        norm = clip_global_norm(self.params, self.clip_norm)
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(p.data.dtype)
        return norm
