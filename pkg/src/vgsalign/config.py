"""Model and run configuration, presets, and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .audio import AudioEmbedderConfig
from .image import ImageEmbedderConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N: int = 1024
    G: int = 2
    block_config: tuple[int, ...] = (6, 12, 64, 48)
    growth: int = 32
    conv_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "block_config", tuple(int(b) for b in self.block_config))

    def audio(self) -> AudioEmbedderConfig:
        return AudioEmbedderConfig(N=self.N, G=self.G, conv_stride=self.conv_stride)

    def image(self) -> ImageEmbedderConfig:
        return ImageEmbedderConfig(N=self.N, growth=self.growth, block_config=self.block_config)

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS: dict[str, ModelConfig] = {
    "DG4A2048": ModelConfig(N=2048, G=4),
    "DG4A1024": ModelConfig(N=1024, G=4),
    "DG3A1024": ModelConfig(N=1024, G=3),
    "DG2A2048": ModelConfig(N=2048, G=2),
    "DG2A1024": ModelConfig(N=1024, G=2),
    "tiny": ModelConfig(N=64, G=1, block_config=(2, 2, 4, 3)),
}


@dataclass
class OptimConfig:
    lr: float = 2e-4
    eta_min: float = 0.0
    beta: float = 0.2
    batch_size: int = 64
    epochs: int = 30
    schedule: str = "CALR"
    T0: int = 1
    mult: int = 2
    seed: int = 0


@dataclass
class DataConfig:
    manifest: str = ""
    cache_root: str = ""


@dataclass
class OutConfig:
    checkpoint_dir: str = "checkpoints"
    log_path: str = "train_log.csv"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: PRESETS["DG3A1024"])
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: OutConfig = field(default_factory=OutConfig)

    def validate(self) -> None:
        o = self.optim
        if not 2 <= o.batch_size <= 64:
            raise ConfigError("optim.batch_size must lie in [2, 64]")
        if o.epochs < 0:
            raise ConfigError("optim.epochs must be >= 0")
        if o.schedule not in ("CALR", "CALWR"):
            raise ConfigError("optim.schedule must be CALR or CALWR")
        if o.lr <= o.eta_min or o.eta_min < 0:
            raise ConfigError("need optim.lr > optim.eta_min >= 0")
        if o.T0 < 1 or o.mult < 1:
            raise ConfigError("need optim.T0 >= 1 and optim.mult >= 1")
        if o.beta < 0:
            raise ConfigError("optim.beta must be >= 0")
        m = self.model
        if m.N < 2 or m.N % 2 or m.G < 1 or m.conv_stride < 1 or m.growth < 1:
            raise ConfigError("model sizes invalid (N even >= 2, G >= 1, conv_stride >= 1, growth >= 1)")
        if not m.block_config or min(m.block_config) < 1:
            raise ConfigError("model.block_config entries must be positive")


def _parse_value(raw: str, current: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.strip("()[] ").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    """Apply ``section.key -> text`` overrides; unknown keys are rejected."""
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    updates: dict[str, dict[str, Any]] = {name: {} for name in sections}
    for key, raw in items.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = sections[section]
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        updates[section][name] = _parse_value(raw, getattr(obj, name), key)
    return RunConfig(**{name: dataclasses.replace(obj, **updates[name]) for name, obj in sections.items()})


def read_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        items[key] = value
    return items


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg.model = PRESETS[preset]
    if path is not None:
        cfg = apply_overrides(cfg, read_config_text(Path(path).read_text(), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        obj = getattr(cfg, section.name)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
