"""Run configuration and its flat ``dotted.key = value`` file format.

Config files hold one assignment per line; ``#`` starts a comment. Values are
Python literals (numbers, strings, tuples, booleans); bare words are read as
strings. Keys mirror the :class:`RunConfig` fields, e.g.::

    mode = pretrain
    vit = toy
    optimizer.lr = 2e-3
    loss.w_pose = 1.0
    mask.ratio_range = (0.1, 0.5)
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigurationError
from .vit import get_config

MODES = ("pretrain", "finetune", "eval", "partial_finetune", "gen_data", "plot")


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 2e-3
    weight_decay: float = 0.04
    batch_size: int = 32
    epochs: int = 50
    warmup_epochs: int = 0
    schedule: str = "constant"  # or "cosine": decay to zero after warmup


@dataclass
class LossWeights:
    w_pose: float = 1.0
    w_patch: float = 1.0
    w_recon: float = 1.0
    w_mano: float = 1.0
    w_vert: float = 1.0
    w_kpt: float = 1.0

    @property
    def pretrain(self):
        return (self.w_pose, self.w_patch, self.w_recon)

    @property
    def finetune(self):
        return (self.w_mano, self.w_vert, self.w_kpt)


@dataclass
class DistillConfig:
    temp_teacher: float = 0.04
    temp_student: float = 0.1
    center_momentum: float = 0.9
    pseudo_count: int = 128
    patch_dim: int = 256
    head_hidden: int = 64
    head_bottleneck: int = 64
    masked_only: bool = True


@dataclass
class MaskConfig:
    ratio_range: Tuple[float, float] = (0.1, 0.5)


@dataclass
class EmaConfig:
    base: float = 0.996
    final: float = 1.0


@dataclass
class DataConfig:
    n_train: int = 500
    n_test: int = 100
    n_pretrain: int = 200
    image_size: int = 64
    crop_ratio: float = 1.3


@dataclass
class PathConfig:
    data: str = ""
    out: str = "runs/out"
    checkpoint: str = ""
    pretrained: str = ""
    hand_model: str = ""


@dataclass
class RunConfig:
    mode: str = "pretrain"
    vit: str = "toy"
    seed: int = 0
    freeze_blocks: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    distill: DistillConfig = field(default_factory=DistillConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "RunConfig":
        cfg = cls(mode=mode)
        if mode in ("finetune", "partial_finetune", "eval"):
            cfg.optimizer = OptimizerConfig(kind="adam", lr=4e-5, weight_decay=0.0, batch_size=32, epochs=100, warmup_epochs=5)
        for k, v in overrides.items():
            cfg.set(k, v)
        cfg.validate()
        return cfg

    @property
    def vit_config(self):
        return get_config(self.vit)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        depth = self.vit_config.depth
        if not 0 <= self.freeze_blocks <= depth:
            raise ConfigurationError(f"freeze_blocks must lie in [0, {depth}]")
        if self.optimizer.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.optimizer.schedule!r}")
        lo, hi = self.mask.ratio_range
        if not 0 < lo <= hi < 1:
            raise ConfigurationError(f"bad mask ratio range {self.mask.ratio_range}")

    def set(self, key: str, value: Any):
        parts = key.split(".")
        obj = self
        for p in parts[:-1]:
            if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
                raise ConfigurationError(f"unknown config key {key!r}")
            obj = getattr(obj, p)
        name = parts[-1]
        if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigurationError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        setattr(obj, name, _coerce(value, current, key))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for key, value in flatten(d).items():
            cfg.set(key, value)
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in flatten(self.to_dict()).items())


def flatten(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot use {value!r} as {type(current).__name__}")
    return str(value)


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> Dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(path, mode: Optional[str] = None) -> RunConfig:
    entries = parse_config_text(Path(path).read_text())
    mode = mode or entries.get("mode", "pretrain")
    cfg = RunConfig.for_mode(mode)
    for key, value in entries.items():
        cfg.set(key, value)
    cfg.validate()
    return cfg
