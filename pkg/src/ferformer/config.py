"""Run configuration and its ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

RAFDB_CLASSES = ("surprise", "fear", "disgust", "happy", "sad", "angry", "neutral")
FERPLUS_CLASSES = RAFDB_CLASSES + ("contempt",)
TEXT_MODES = ("none", "word", "phrase", "active", "passive")
HEAD_MODES = ("image", "text", "fused")


@dataclass
class Config:
    # model
    image_size: int = 112
    stem_channels: tuple[int, ...] = (16, 32, 64)
    patch_sizes: tuple[int, ...] = (2, 4, 6, 12)
    embed_dim: int = 256
    depth: int = 16
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.0
    # text branch
    text_mode: str = "phrase"
    text_dim: int = 64
    text_depth: int = 2
    text_heads: int = 2
    text_max_len: int = 16
    freeze_text: bool = False
    # heads
    head: str = "image"
    normalize_steering: bool = True
    logit_scale: float = 1.0
    # optimisation
    batch_size: int = 16
    lr0: float = 1e-4
    lr_decay_every: int = 30
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 90
    seed: int = 0
    precision: str = "f32"
    # augmentation
    augment: bool = True
    p_grayscale: float = 0.1
    p_flip: float = 0.5
    p_erase: float = 0.5
    erase_area_min: float = 0.02
    erase_area_max: float = 0.2
    # synthetic data
    num_classes: int = 7
    per_class: int = 10
    test_per_class: int = 10
    noise_level: float = 0.1
    ambiguity_rate: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.text_mode not in TEXT_MODES:
            raise ConfigError(f"text_mode must be one of {TEXT_MODES}, got {self.text_mode!r}")
        if self.head not in HEAD_MODES:
            raise ConfigError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.text_dim % self.text_heads:
            raise ConfigError(f"text_heads={self.text_heads} must divide text_dim={self.text_dim}")
        bad = [p for p in self.patch_sizes if p < 1 or 12 % p]
        if bad or not self.patch_sizes:
            raise ConfigError(f"patch sizes must divide 12, got {self.patch_sizes}")
        if len(self.stem_channels) != 3:
            raise ConfigError("stem_channels needs three stage widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def hdss(self) -> bool:
        return self.text_mode != "none"

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={format_value(getattr(self, f.name))}" for f in fields(self)]

    def diff(self, other: "Config") -> dict[str, tuple[Any, Any]]:
        return {
            f.name: (getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
            if getattr(self, f.name) != getattr(other, f.name)
        }


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(name: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


_KINDS = {f.name: str(f.type) for f in fields(Config)}


def parse_lines(lines, base: Config | None = None, strict: bool = True) -> tuple[Config, dict[str, str]]:
    """Parse ``key=value`` lines. Returns the config and any unknown keys (when not strict)."""
    values: dict[str, Any] = {}
    extra: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KINDS:
            if strict:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            extra[key] = raw
            continue
        values[key] = _parse(key, _KINDS[key], raw)
    cfg = dataclasses.replace(base or Config(), **values)
    return cfg, extra


def load_config(path: str | Path, base: Config | None = None) -> Config:
    text = Path(path).read_text(encoding="utf-8")
    return parse_lines(text.splitlines(), base)[0]


def parse_overrides(pairs, base: Config) -> Config:
    return parse_lines(pairs, base)[0]
