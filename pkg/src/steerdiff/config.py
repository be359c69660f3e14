"""Run configuration: defaults, TOML files, and command-line overrides.

Every knob has a default; a TOML file overrides defaults and flags override
the file. Unknown keys are rejected. The fully-resolved configuration is
echoed into each run directory so any run can be reproduced from its echo and
seed alone.

Scalars the source method leaves unstated live here with their defaults:
attention sigma = 5% of the output width, threshold = 0.6 of the map peak,
fusion weights = 1, T = 200, inference steps = T.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


@dataclass
class PhantomConfig:
    resolution: int = 64
    n_classes: int = 3          # first n of the built-in class list
    noise: float = 0.015


@dataclass
class GazeConfig:
    sigma_frac: float = 0.05    # attention blur as a fraction of output width
    lam: float = 0.6            # threshold as a fraction of the map peak
    absolute_lambda: bool = False
    duration_weighting: bool = True


@dataclass
class FilterConfig:
    canny_low: float = 0.1
    canny_high: float = 0.3
    log_sigma: float = 2.0


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    lr: float = 1e-4
    steps: int = 10000
    batch: int = 4
    ckpt_every: int = 2000
    clip_norm: float = 1.0
    levels: int = 3
    channels: tuple = (16, 32, 48)
    time_width: int = 64
    token_width: int = 64


@dataclass
class AdapterConfig:
    steps: int = 5000
    lr: float = 1e-4
    batch: int = 4
    weight_rad: float = 1.0
    weight_hva: float = 1.0
    hva_control: str = "hypothesis"   # or "heatmap"
    bag_size: int = 8

    def __post_init__(self):
        if self.hva_control not in ("hypothesis", "heatmap"):
            raise ValueError(
                f"hva_control must be 'hypothesis' or 'heatmap', got {self.hva_control!r}")


@dataclass
class ClassifierConfig:
    epochs: int = 40
    lr: float = 1.5e-3
    batch: int = 32


@dataclass
class EvalConfig:
    n_images: int = 80
    sample_steps: int = 0       # 0 means the full schedule (t* = T)


@dataclass
class LtConfig:
    target: int = 200
    generator: str = "fused"    # none | fused | rad | hva
    strict_pairing: bool = True
    sample_steps: int = 50
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.generator not in ("none", "fused", "rad", "hva"):
            raise ValueError(f"unknown generator mode {self.generator!r}")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    threads: int = 1
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    gaze: GazeConfig = field(default_factory=GazeConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lt: LtConfig = field(default_factory=LtConfig)

    def hva_sigma(self, width: int) -> float:
        return self.gaze.sigma_frac * width


def _section_types():
    out = {}
    for f in fields(RunConfig):
        if f.default_factory is not dataclasses.MISSING:
            probe = f.default_factory()
            if dataclasses.is_dataclass(probe):
                out[f.name] = type(probe)
    return out


def _coerce(value, current):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        return tuple(int(v) if float(v) == int(float(v)) else float(v) for v in value)
    return str(value)


def _apply_section(section_obj, values: dict, prefix: str):
    known = {f.name for f in fields(section_obj)}
    for key, val in values.items():
        if key not in known:
            raise KeyError(f"unknown config key {prefix}{key!r}")
        setattr(section_obj, key, _coerce(val, getattr(section_obj, key)))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then TOML file, then dotted-key overrides (flags win)."""
    cfg = RunConfig()
    sections = _section_types()
    if path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
        for key, val in data.items():
            if key in sections:
                if not isinstance(val, dict):
                    raise KeyError(f"config section {key!r} must be a table")
                _apply_section(getattr(cfg, key), val, f"{key}.")
            elif key in ("seed", "out", "threads"):
                setattr(cfg, key, _coerce(val, getattr(cfg, key)))
            else:
                raise KeyError(f"unknown config key {key!r}")
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            if section not in sections:
                raise KeyError(f"unknown config section {section!r}")
            _apply_section(getattr(cfg, section), {key: val}, f"{section}.")
        elif dotted in ("seed", "out", "threads"):
            setattr(cfg, dotted, _coerce(val, getattr(cfg, dotted)))
        else:
            raise KeyError(f"unknown config key {dotted!r}")
    # re-run section validation after mutation
    cfg.adapters.__post_init__()
    cfg.lt.__post_init__()
    if cfg.threads < 1:
        raise ValueError(f"threads must be >= 1, got {cfg.threads}")
    return cfg


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(cfg: RunConfig) -> str:
    """Serialize the resolved config as TOML text."""
    lines = []
    for name in ("seed", "out", "threads"):
        lines.append(f"{name} = {_toml_value(getattr(cfg, name))}")
    for section in _section_types():
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_toml_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_config(cfg))
