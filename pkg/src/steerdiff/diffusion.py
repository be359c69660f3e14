"""Denoising diffusion core: schedule, forward noising, training, sampling.

The forward process adds Gaussian noise under a linear variance schedule; its
closed-form composition x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps drives
noise-prediction training (mean squared error between drawn and predicted
noise). Sampling runs the ancestral reverse chain from pure noise, with an
evenly strided sub-sequence when fewer inference steps are requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .seeds import derive_rng

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.04


@dataclass
class NoiseSchedule:
    """Per-step variances and their running products, computed in 64-bit."""

    T: int
    beta: np.ndarray        # [T], beta_1..beta_T
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product of alpha

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"schedule needs T >= 2, got {self.T}")
        for name in ("beta", "alpha", "alpha_bar"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
            setattr(self, name, arr)
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ValueError("every beta_t must lie strictly inside (0, 1)")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    def abar(self, t):
        """alpha_bar at 1-indexed timestep(s) t; abar(0) is defined as 1."""
        t = np.asarray(t)
        out = np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)
        return out if out.ndim else float(out)


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta interpolation from beta_start to beta_end over T steps."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample t allowed."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = np.asarray(t).reshape(-1)
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"t outside [1, {schedule.T}]: {t.min()}..{t.max()}")
    abar = schedule.alpha_bar[t - 1]
    if t.size == 1:
        a = float(abar[0])
        return (np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps).astype(x0.dtype)
    if x0.shape[0] != t.size:
        raise ValueError(f"per-sample t count {t.size} != batch {x0.shape[0]}")
    shape = (t.size,) + (1,) * (x0.ndim - 1)
    a = abar.reshape(shape)
    return (np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps).astype(x0.dtype)


@dataclass
class TrainSample:
    """One training draw: clean image, token, controls, timestep, noise."""

    x0: np.ndarray
    token: int
    controls: np.ndarray | None
    t: int
    eps: np.ndarray

    def __post_init__(self):
        if not (1 <= self.t):
            raise ValueError(f"timestep must be >= 1, got {self.t}")
        if np.asarray(self.eps).shape != np.asarray(self.x0).shape:
            raise ValueError("eps shape must match x0 shape")


def batch_arrays(batch):
    """Stack a list of TrainSample into contiguous training arrays."""
    x0 = np.stack([s.x0 for s in batch]).astype(np.float32)
    eps = np.stack([s.eps for s in batch]).astype(np.float32)
    t = np.array([s.t for s in batch], dtype=np.int64)
    tokens = np.array([s.token for s in batch], dtype=np.int64)
    controls = None
    if batch[0].controls is not None:
        controls = np.stack([s.controls for s in batch]).astype(np.float32)
    return x0, eps, t, tokens, controls


def train_step(backbone, batch, schedule: NoiseSchedule, optim: nn.Adam,
               adapter=None) -> tuple:
    """One noise-prediction update; returns (loss, grad_norm).

    With an adapter present, the backbone stays frozen (its parameters are not
    in the optimizer) and conditioning residuals come from the adapter.
    """
    x0, eps, t, tokens, controls = batch_arrays(batch)
    if (t > schedule.T).any():
        raise ValueError(f"timestep beyond schedule T={schedule.T}")
    xt = forward_sample(x0, t, eps, schedule)
    residuals = None
    if adapter is not None:
        if controls is None:
            raise ValueError("adapter training needs controls in every TrainSample")
        residuals = adapter.residuals(Tensor(xt), t, tokens, Tensor(controls))
    pred = backbone(Tensor(xt), t, tokens, residuals=residuals) if residuals is not None \
        else backbone(Tensor(xt), t, tokens)
    loss = ad.mse(Tensor(eps), pred)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise RuntimeError(
            f"non-finite loss {loss_val} at optimizer step {optim.step_count + 1} "
            f"(lr={optim.lr}, last grad norm unavailable); aborting")
    if not loss.requires_grad:
        return loss_val, 0.0  # everything frozen: evaluation only
    optim.zero_grad()
    ad.backward(loss)
    grad_norm = optim.step()
    if not np.isfinite(grad_norm):
        raise RuntimeError(
            f"non-finite gradient norm at step {optim.step_count} (lr={optim.lr})")
    return loss_val, grad_norm


def strided_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced 1..T inclusive sub-sequence of the requested length."""
    if not (1 <= steps <= T):
        raise ValueError(f"inference steps must lie in [1, {T}], got {steps}")
    taus = np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))
    return taus


def sample(backbone, schedule: NoiseSchedule, tokens, shape, seed: int,
           steps: int | None = None, residual_fn=None, return_chain: bool = False):
    """Ancestral reverse-chain sampling from unit Gaussian noise.

    ``residual_fn(xt, t_batch) -> residual list`` injects adapter conditioning
    at every step. Deterministic for a given seed; the output is clamped to
    [-1, 1] at the end only.
    """
    steps = schedule.T if steps is None else steps
    taus = strided_timesteps(schedule.T, steps)
    rng = derive_rng(seed, "sample")
    n = shape[0]
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size == 1:
        tokens = np.full(n, int(tokens[0]))
    x = rng.standard_normal(shape).astype(np.float32)
    chain = [x.copy()] if return_chain else None

    with ad.no_grad():
        for i in range(len(taus) - 1, -1, -1):
            t = int(taus[i])
            prev = int(taus[i - 1]) if i > 0 else 0
            abar_t = schedule.abar(t)
            abar_prev = schedule.abar(prev)
            beta_eff = 1.0 - abar_t / abar_prev
            alpha_eff = 1.0 - beta_eff
            t_batch = np.full(n, t)
            residuals = residual_fn(Tensor(x), t_batch) if residual_fn is not None else None
            eps_hat = backbone(Tensor(x), t_batch, tokens, residuals=residuals).data \
                if residuals is not None else backbone(Tensor(x), t_batch, tokens).data
            mean = (x - (beta_eff / np.sqrt(1.0 - abar_t)) * eps_hat) / np.sqrt(alpha_eff)
            if prev > 0:
                var = (1.0 - abar_prev) / (1.0 - abar_t) * beta_eff
                x = (mean + np.sqrt(var) * rng.standard_normal(shape)).astype(np.float32)
            else:
                x = mean.astype(np.float32)
            if return_chain:
                chain.append(x.copy())

    x = np.clip(x, -1.0, 1.0)
    return (x, chain) if return_chain else x


def fit(backbone, schedule: NoiseSchedule, provider, steps: int, seed: int,
        lr: float = 1e-4, batch_size: int = 4, adapter=None, log_path=None,
        ckpt_every: int = 0, ckpt_fn=None, clip_norm: float = 1.0,
        progress_every: int = 0) -> list:
    """Generic training loop over a sample provider.

    ``provider(index, rng) -> TrainSample`` supplies clean images (and controls
    when training an adapter). Trainable parameters are the adapter's when one
    is given, otherwise the backbone's. Returns the loss history and marks the
    trained module.
    """
    module = adapter if adapter is not None else backbone
    optim = nn.Adam(module.parameters(), lr=lr, clip_norm=clip_norm)
    if not optim.params:
        raise ValueError("nothing to train: module has no trainable parameters")
    rng = derive_rng(seed, "train")
    history = []
    writer = None
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "grad_norm", "lr"])
    try:
        for step in range(1, steps + 1):
            batch = [provider(int(rng.integers(0, 2 ** 31)), rng) for _ in range(batch_size)]
            loss, grad_norm = train_step(backbone, batch, schedule, optim, adapter=adapter)
            history.append(loss)
            if writer is not None:
                writer.writerow([step, f"{loss:.6f}", f"{grad_norm:.6f}", optim.lr])
            if ckpt_every and ckpt_fn and step % ckpt_every == 0:
                ckpt_fn(step)
            if progress_every and step % progress_every == 0:
                recent = float(np.mean(history[-progress_every:]))
                print(f"  step {step}/{steps} loss {recent:.4f}", flush=True)
    finally:
        if log_file is not None:
            log_file.close()
    module.trained = True
    return history


def make_provider(images, labels, schedule: NoiseSchedule, controls=None):
    """Uniform sampler over a dataset: images in [0,1] become [-1,1] targets."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")

    def provider(_, rng):
        i = int(rng.integers(0, n))
        x0 = images[i, ...] * 2.0 - 1.0
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        ctl = None if controls is None else controls[i]
        return TrainSample(x0, int(labels[i]), ctl, t, eps)

    return provider
