"""Control adapters: trainable copies of the frozen backbone's encoder that
translate control images into per-level decoder residuals.

Each adapter clones the backbone's conditioning, stem, encoder and bottleneck
blocks, maps its control input to the first-level width through a small head
whose final convolution starts at zero, and emits one residual per decoder
level plus one for the bottleneck through zero-initialized 1x1 couplers. At
creation the couplers are exactly zero, so conditioning is a no-op until
training moves them; the backbone itself is frozen and never updated.

Two adapters are fused at inference by a level-wise weighted sum of their
residuals; per-control indicator flags select any subset (an excluded control
kind is an all-zero channel, an adapter with no active kinds is skipped).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import nn
from .autodiff import Tensor
from .filters import CONTROL_KINDS, RADIOMIC_KINDS, canonical_kind
from .seeds import derive_rng
from .unet import ConditionEmbedding, ResBlock, UNet

ADAPTER_KINDS = ("rad_cn", "hva_cn")
STACK_WIDTH = len(CONTROL_KINDS)

# user-facing indicator switches: four filter kinds plus the gaze adapter
INDICATOR_KINDS = RADIOMIC_KINDS + ("hva",)


class ControlAdapter(nn.Module):
    """Trainable copy + control head + zero couplers for one control family."""

    def __init__(self, spec, kind: str, control_channels: int, rng, dtype=np.float32):
        if kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter kind must be one of {ADAPTER_KINDS}, got {kind!r}")
        ch = spec.channels
        L = spec.levels
        self.kind = kind
        self.control_channels = control_channels
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
        self.head_in = nn.Conv2d(control_channels, ch[0], 3, rng=rng, dtype=dtype)
        self.head_out = nn.Conv2d(ch[0], ch[0], 3, zero_init=True, dtype=dtype)
        self.couplers = nn.ModuleList(
            nn.Conv2d(ch[l], ch[l], 1, pad=0, zero_init=True, dtype=dtype) for l in range(L))
        self.coupler_mid = nn.Conv2d(ch[-1], ch[-1], 1, pad=0, zero_init=True, dtype=dtype)

    def couplers_are_zero(self) -> bool:
        mods = list(self.couplers) + [self.coupler_mid]
        return all(not m.weight.data.any() and not m.bias.data.any() for m in mods)

    def residuals(self, x_t: Tensor, t, token, control: Tensor):
        """Per-level residual tensors aligned to the backbone decoder levels.

        Returns levels+1 tensors: one per decoder skip, the last for the
        bottleneck output.
        """
        n, c, h, w = x_t.shape
        if control.shape[0] != n or control.shape[1] != self.control_channels \
                or control.shape[2:] != (h, w):
            raise ad.ShapeError(
                f"control shape {tuple(control.shape)} does not match input "
                f"{(n, self.control_channels, h, w)}")
        t = np.asarray(t).reshape(-1)
        if t.size == 1:
            t = np.full(n, int(t[0]))
        token = np.asarray(token).reshape(-1)
        if token.size == 1:
            token = np.full(n, int(token[0]))
        emb = self.cond(t, token)
        hint = self.head_out(ad.silu(self.head_in(control)))
        hcur = ad.add(self.stem(x_t), hint)
        out = []
        L = self.spec.levels
        for l in range(L):
            hcur = self.enc[l](hcur, emb)
            out.append(self.couplers[l](hcur))
            if l < L - 1:
                hcur = self.down[l](hcur)
        hcur = self.mid1(hcur, emb)
        hcur = self.mid2(hcur, emb)
        out.append(self.coupler_mid(hcur))
        return out

    def save(self, stem):
        ckpt.save_module(stem, self, meta={
            "kind": self.kind,
            "control_channels": self.control_channels,
            "netspec": self.spec.to_dict(),
            "trained": self.trained,
        })


def make_adapter(backbone: UNet, kind: str, control_channels: int | None = None,
                 seed: int = 0) -> ControlAdapter:
    """Clone the trained backbone's encoder into a fresh adapter.

    The copy starts from the backbone's weights, every coupler (and the last
    control-head convolution) starts at exactly zero, and the backbone is
    frozen in place. Rad adapters must consume the full canonical stack width,
    gaze adapters a single channel.
    """
    if not getattr(backbone, "trained", False):
        raise ValueError("backbone must be trained before adapters are attached")
    expected = STACK_WIDTH if kind == "rad_cn" else 1
    if control_channels is None:
        control_channels = expected
    if control_channels != expected:
        raise ValueError(
            f"{kind} expects {expected} control channels "
            f"(canonical stack width is {STACK_WIDTH}), got {control_channels}")
    adapter = ControlAdapter(backbone.spec, kind, control_channels,
                             derive_rng(seed, "adapter", kind))
    shared = backbone.state_dict()
    own = dict(adapter.named_parameters())
    for name, arr in shared.items():
        if name in own and own[name].data.shape == arr.shape:
            own[name].data = arr.copy()
    backbone.freeze()
    return adapter


def load_adapter(stem, backbone: UNet) -> ControlAdapter:
    tensors, meta = ckpt.load_checkpoint(stem)
    kind = meta.get("kind")
    if kind not in ADAPTER_KINDS:
        raise ValueError(f"checkpoint {stem} is not a control adapter (kind={kind!r})")
    if meta.get("netspec") != backbone.spec.to_dict():
        raise ValueError(
            f"adapter {stem} was built for a different backbone architecture: "
            f"{meta.get('netspec')} vs {backbone.spec.to_dict()}")
    adapter = ControlAdapter(backbone.spec, kind, int(meta["control_channels"]),
                             np.random.default_rng(0))
    adapter.load_state_dict(tensors)
    adapter.trained = bool(meta.get("trained", False))
    return adapter


@dataclass
class FusionConfig:
    """Residual fusion weights and per-control indicator flags."""

    weight_rad: float = 1.0
    weight_hva: float = 1.0
    active: dict = field(default_factory=lambda: {k: True for k in INDICATOR_KINDS})

    def __post_init__(self):
        if self.weight_rad < 0 or self.weight_hva < 0:
            raise ValueError("fusion weights must be nonnegative")
        unknown = sorted(set(self.active) - set(INDICATOR_KINDS))
        if unknown:
            raise ValueError(f"unknown indicator kinds {unknown}; expected {INDICATOR_KINDS}")
        full = {k: False for k in INDICATOR_KINDS}
        full.update(self.active)
        self.active = full

    @classmethod
    def from_controls(cls, controls, weight_rad: float = 1.0, weight_hva: float = 1.0):
        """Build from a list like ["canny", "seg", "hva"]; empty means none."""
        active = {k: False for k in INDICATOR_KINDS}
        for name in controls:
            name = canonical_kind(name) if name != "hva" else "hva"
            if name == "hypothesis":
                name = "hva"
            if name not in INDICATOR_KINDS:
                raise ValueError(f"{name!r} is not a control indicator {INDICATOR_KINDS}")
            active[name] = True
        return cls(weight_rad, weight_hva, active)

    def rad_enabled(self) -> bool:
        return any(self.active[k] for k in RADIOMIC_KINDS)

    def hva_enabled(self) -> bool:
        return self.active["hva"]

    def channel_mask(self) -> np.ndarray:
        """[STACK_WIDTH] multiplier zeroing stack channels of inactive kinds."""
        mask = np.zeros(STACK_WIDTH, dtype=np.float32)
        for i, kind in enumerate(CONTROL_KINDS):
            flag = "hva" if kind in ("hva", "hypothesis") else kind
            mask[i] = 1.0 if self.active.get(flag, False) else 0.0
        return mask


def fuse(residuals_rad, residuals_hva, cfg: FusionConfig):
    """Level-wise weighted sum of two residual lists (either may be None)."""
    if residuals_rad is None and residuals_hva is None:
        return None
    if residuals_rad is not None and residuals_hva is not None:
        if len(residuals_rad) != len(residuals_hva):
            raise ValueError(
                f"residual level counts differ: {len(residuals_rad)} vs {len(residuals_hva)}")
        return [ad.add(ad.mul_const(a, cfg.weight_rad), ad.mul_const(b, cfg.weight_hva))
                for a, b in zip(residuals_rad, residuals_hva)]
    if residuals_rad is not None:
        return [ad.mul_const(r, cfg.weight_rad) for r in residuals_rad]
    return [ad.mul_const(r, cfg.weight_hva) for r in residuals_hva]


def make_residual_fn(tokens, rad=None, hva=None, stack=None, hva_control=None,
                     cfg: FusionConfig | None = None):
    """Closure for the sampler: computes fused residuals at each reverse step.

    ``stack`` is [N, STACK_WIDTH, H, W], ``hva_control`` [N, 1, H, W]. Controls
    for inactive indicator kinds are zeroed; an adapter with no active kinds
    (or no control input) contributes nothing at all, so all-indicators-off
    reproduces unconditional sampling exactly.
    """
    cfg = cfg or FusionConfig()
    tokens = np.asarray(tokens).reshape(-1)
    use_rad = rad is not None and stack is not None and cfg.rad_enabled()
    use_hva = hva is not None and hva_control is not None and cfg.hva_enabled()
    if not use_rad and not use_hva:
        return None
    if use_rad:
        masked = np.asarray(stack, dtype=np.float32) * cfg.channel_mask()[None, :, None, None]
    if use_hva:
        hva_arr = np.asarray(hva_control, dtype=np.float32)

    def residual_fn(xt: Tensor, t_batch):
        toks = tokens if tokens.size == xt.shape[0] else np.full(xt.shape[0], int(tokens[0]))
        r_rad = rad.residuals(xt, t_batch, toks, Tensor(masked)) if use_rad else None
        r_hva = hva.residuals(xt, t_batch, toks, Tensor(hva_arr)) if use_hva else None
        return fuse(r_rad, r_hva, cfg)

    return residual_fn


def sample_controlled(backbone, schedule, tokens, shape, seed, steps=None,
                      rad=None, hva=None, stack=None, hva_control=None,
                      cfg: FusionConfig | None = None):
    """Full reverse chain with fused adapter conditioning at every step."""
    from . import diffusion

    for adapter, name in ((rad, "rad_cn"), (hva, "hva_cn")):
        if adapter is not None and not getattr(adapter, "trained", False):
            raise ValueError(f"{name} adapter is untrained; train or load it first")
    fn = make_residual_fn(tokens, rad=rad, hva=hva, stack=stack,
                          hva_control=hva_control, cfg=cfg)
    return diffusion.sample(backbone, schedule, tokens, shape, seed,
                            steps=steps, residual_fn=fn)
