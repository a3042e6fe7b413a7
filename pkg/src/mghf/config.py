"""Configuration dataclasses and the flat ``key=value`` file format.

Defaults that come from the method's published settings are marked below;
everything else is a local choice exposed for tuning.
"""
from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

FORMAT_VERSION = 1

# published reference values
REFERENCE_N_CHANNELS = 128
REFERENCE_N_BLOCKS = 1
REFERENCE_PARAM_COUNT = 343_616


@dataclass(frozen=True)
class DfeConfig:
    n_channels: int = 8  # 128 in the published setup; desk default is 8
    n_blocks: int = 1
    hidden: int | None = None  # shallow-CNN width; None -> n_channels // 2
    kernel_size: int = 3
    scale_clamp: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_channels < 2 or self.n_channels % 2:
            raise ValueError(f"n_channels must be even and >= 2, got {self.n_channels}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.scale_clamp <= 0:
            raise ValueError("scale_clamp must be positive")

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else self.n_channels // 2

    @classmethod
    def reference(cls) -> "DfeConfig":
        return cls(n_channels=REFERENCE_N_CHANNELS, n_blocks=REFERENCE_N_BLOCKS)


@dataclass(frozen=True)
class PruningConfig:
    bins: int = 64
    m: int | None = None  # None -> ceil(L / 2)
    alpha: float = 1.0
    gamma: float = 1.0

    def resolve_m(self, n_maps: int) -> int:
        return self.m if self.m is not None else math.ceil(n_maps / 2)


@dataclass(frozen=True)
class CscWeights:
    beta1: float = 0.1333  # MSE content
    beta2: float = 1.0  # correlation
    beta3: float = 0.1333  # Gram style
    gram_mode: str = "row"  # "row": A A^T / (HW); "flat": mean(A^2) as a 1x1 Gram

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("CSC weights must be nonnegative")
        if self.gram_mode not in ("row", "flat"):
            raise ValueError(f"unknown gram_mode {self.gram_mode!r}")


@dataclass(frozen=True)
class MonceConfig:
    tau: float = 0.07
    beta_ot: float = 1.0
    q: float = 1.0  # negative-term weight, 1 in the published setup
    sinkhorn_epsilon: float = 0.5
    sinkhorn_max_iters: int = 500
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        if self.tau <= 0 or self.beta_ot <= 0 or self.sinkhorn_epsilon <= 0:
            raise ValueError("tau, beta_ot and sinkhorn_epsilon must be positive")
        if self.q < 0:
            raise ValueError("q must be >= 0")
        if self.sinkhorn_max_iters < 1 or self.sinkhorn_tol <= 0:
            raise ValueError("sinkhorn_max_iters must be >= 1 and sinkhorn_tol > 0")


@dataclass(frozen=True)
class LipConfig:
    patch_size: int = 32
    stride: int = 16
    embed_hidden: int = 256
    embed_dim: int = 256
    embed_seed: int = 0
    on_pruned: bool = False  # run LIP on the weighted pruned maps instead of all maps

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")


@dataclass(frozen=True)
class MghfConfig:
    gamma1: float = 2.0
    gamma2: float = 1.5
    gamma3: float = 1e-3
    use_lip: bool = True
    csc: CscWeights = field(default_factory=CscWeights)
    monce: MonceConfig = field(default_factory=MonceConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    lip: LipConfig = field(default_factory=LipConfig)

    @property
    def gammas(self) -> tuple[float, float, float]:
        return (self.gamma1, self.gamma2, self.gamma3)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch: int = 32
    decay_factor: float = 0.95
    decay_every: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    total_iters: int = 2000
    seed: int = 0
    classes: int = 4
    image_size: int = 32
    noise: float = 0.1
    head_widths: tuple[int, ...] = (8, 16)

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.decay_factor ** (iteration // self.decay_every)


@dataclass(frozen=True)
class AppConfig:
    dfe: DfeConfig = field(default_factory=DfeConfig)
    mghf: MghfConfig = field(default_factory=MghfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


class ConfigError(ValueError):
    pass


def flatten(cfg) -> dict[str, object]:
    """Dotted ``key -> value`` view of a (nested) config dataclass, in field order."""
    out: dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for k, v in flatten(value).items():
                out[f"{f.name}.{k}"] = v
        else:
            out[f.name] = value
    return out


def _parse_value(text: str, hint) -> object:
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", "null", ""):
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse_value(text, inner)
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if origin is tuple:
        return tuple(int(p) for p in text.split(",") if p.strip())
    raise ConfigError(f"unsupported config type {hint}")


def with_overrides(cfg, overrides: dict[str, str]):
    """Return a copy of ``cfg`` with dotted-key string overrides applied. Unknown keys raise."""
    grouped: dict[str, dict[str, str]] = {}
    direct: dict[str, object] = {}
    hints = typing.get_type_hints(type(cfg))
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, raw in overrides.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        sub = getattr(cfg, head)
        if dataclasses.is_dataclass(sub):
            if not rest:
                raise ConfigError(f"config key {key!r} names a section, not a value")
            grouped.setdefault(head, {})[rest] = raw
        else:
            if rest:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                direct[head] = _parse_value(raw, hints[head])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
    for head, sub_over in grouped.items():
        direct[head] = with_overrides(getattr(cfg, head), sub_over)
    try:
        return dataclasses.replace(cfg, **direct)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_config(path: str | Path | None, base: AppConfig | None = None) -> AppConfig:
    cfg = base or AppConfig()
    if path is None:
        return cfg
    return with_overrides(cfg, parse_config_text(Path(path).read_text(encoding="utf-8")))


def dump_config(cfg) -> str:
    lines = []
    for key, value in flatten(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={'none' if value is None else value}")
    return "\n".join(lines) + "\n"
