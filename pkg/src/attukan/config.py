"""Run configuration and its plain-text ``section.key = value`` file format.

Example::

    # tiny run
    model.channels = 8, 16, 32, 64, 128
    train.epochs = 30
    loss.lpcl = 0.3
    lpcl.feature_level = 5
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import AugmentConfig, PreprocessConfig, SynthConfig
from .kanblocks import SplineSpec
from .losses import LPCL_MODES, LossWeights
from .network import ModelConfig


class ConfigError(ValueError):
    """Bad configuration text or value; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 25
    patch_size: int = 64
    patches_per_image: int = 25
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patches_per_image < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patches_per_image >= 1 are required")
        if self.patch_size < 16 or self.patch_size % 16:
            raise ValueError(f"patch_size must be a positive multiple of 16, got {self.patch_size}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class LpclConfig:
    tau: float = 0.5
    mode: str = "label_masked"
    feature_level: int = 5
    reduction: str = "mean"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mode not in LPCL_MODES:
            raise ValueError(f"lpcl mode must be one of {LPCL_MODES}, got {self.mode!r}")
        if self.feature_level not in (3, 4, 5):
            raise ValueError(f"feature_level must be 3, 4 or 5, got {self.feature_level}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a dataset directory
    n_images: int = 20

    def __post_init__(self):
        if self.n_images < 2:
            raise ValueError("n_images must be at least 2")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lpcl: LpclConfig = field(default_factory=LpclConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            sub = dict(d[f.name])
            if f.name == "model":
                kw[f.name] = ModelConfig.from_dict(sub)
                continue
            proto = f.default_factory()
            for k, v in sub.items():
                if isinstance(getattr(proto, k, None), tuple):
                    sub[k] = tuple(v)
            kw[f.name] = type(proto)(**sub)
        return cls(**kw)

    def with_values(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` overrides (``model__use_attention_gates=False``)."""
        cfg = self
        for key, value in dotted.items():
            section, name = key.split("__", 1)
            cfg = _set(cfg, section, name, value)
        return cfg


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# section name -> (owner path inside RunConfig)
SECTIONS = {
    "model": ("model",),
    "kan": ("model", "kan"),
    "loss": ("loss",),
    "lpcl": ("lpcl",),
    "optim": ("optim",),
    "train": ("train",),
    "data": ("data",),
    "synth": ("synth",),
    "augment": ("augment",),
    "preprocess": ("preprocess",),
}


def _target(cfg: RunConfig, section: str):
    obj = cfg
    for part in SECTIONS[section]:
        obj = getattr(obj, part)
    return obj


def _set(cfg: RunConfig, section: str, key: str, value) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    path = SECTIONS[section]
    owner = _target(cfg, section)
    names = {f.name for f in fields(owner)}
    if key not in names or (section == "model" and key == "kan"):
        raise ConfigError(f"unknown key {section}.{key}")
    new = replace(owner, **{key: value})
    if len(path) == 2:
        parent = getattr(cfg, path[0])
        return replace(cfg, **{path[0]: replace(parent, **{path[1]: new})})
    return replace(cfg, **{path[0]: new})


def _coerce(raw: str, current: Any):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [s for s in raw.strip("[]()").replace(",", " ").split()]
        if not items:
            raise ValueError("expected a list of numbers")
        kind = type(current[0]) if current else float
        return tuple(kind(s) for s in items)
    return raw


def parse_config(text: str, path: str | None = None, base: RunConfig | None = None) -> RunConfig:
    """Parse ``section.key = value`` lines (``#`` starts a comment) on top of ``base``."""
    cfg = base or RunConfig()
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'section.key = value', got {body!r}", lineno, path)
        lhs, rhs = (s.strip() for s in body.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"key {lhs!r} must be written as section.key", lineno, path)
        section, key = lhs.split(".", 1)
        if lhs in seen:
            raise ConfigError(f"{lhs} already set on line {seen[lhs]}", lineno, path)
        seen[lhs] = lineno
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}", lineno, path)
        owner = _target(cfg, section)
        if key not in {f.name for f in fields(owner)} or (section == "model" and key == "kan"):
            raise ConfigError(f"unknown key {lhs}", lineno, path)
        try:
            value = _coerce(rhs, getattr(owner, key))
            cfg = _set(cfg, section, key, value)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{lhs}: {e}", lineno, path) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`: every field on its own line."""
    lines = []
    for section in SECTIONS:
        owner = _target(cfg, section)
        for f in fields(owner):
            if dataclasses.is_dataclass(getattr(owner, f.name)):
                continue
            v = getattr(owner, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
