"""Flat ``key = value`` config files and the training configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .model import ARCHS, ENCODERS, MODES, EncoderSpec, ModelSpec


class ConfigError(ValueError):
    def __init__(self, msg, line_no=None, line=None):
        where = f"line {line_no}: {line.rstrip()!r}: " if line_no is not None else ""
        super().__init__(where + msg)
        self.line_no = line_no
        self.line = line


def read_kv(path) -> list[tuple[int, str, str, str]]:
    """Parse ``key = value`` lines; '#' starts a comment. Returns (line_no, key, value, raw)."""
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", no, raw)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError("empty key or value", no, raw)
        out.append((no, key, value, raw))
    return out


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_range(v: str) -> tuple:
    parts = [p for p in v.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {v!r}")
    return (float(parts[0]), float(parts[1]))


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 40
    batch_size: int = 32
    lam: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    # model
    n_joints: int = 14
    arch: str = "trihorn"
    mode: str = "fused"
    encoder: str = "hourglass"
    base_channels: int = 16
    out_channels: int = 16
    head_channels: int = 16
    levels: int = 3
    depth_features: int = 64
    regression_hidden: int = 128
    # preprocessing
    cube_mm: float = 150.0
    out_size: int = 128
    # augmentation
    augment: bool = True
    pixdropout: bool = True
    alpha: float = 0.15
    rot_deg: tuple = (-180.0, 180.0)
    scale: tuple = (0.9, 1.1)
    trans_mm: tuple = (-8.0, 8.0)
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.arch not in ARCHS or self.mode not in MODES or self.encoder not in ENCODERS:
            raise ValueError(f"bad arch/mode/encoder: {self.arch}/{self.mode}/{self.encoder}")
        self.augment_config()

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            n_joints=self.n_joints, depth_features=self.depth_features,
            head_channels=self.head_channels, mode=self.mode, arch=self.arch,
            regression_hidden=self.regression_hidden,
            encoder=EncoderSpec(self.encoder, self.base_channels, self.out_channels, self.levels),
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(alpha=self.alpha if self.pixdropout else 0.0, rot_deg=self.rot_deg,
                             scale=self.scale, trans_mm=self.trans_mm, rng_seed=self.seed,
                             geometric=self.augment)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = f"{v[0]!r}, {v[1]!r}"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{'lambda' if f.name == 'lam' else f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    # desk-scale defaults; see README for the sizing rationale
    "default": {},
    "overfit": dict(epochs=500, batch_size=4, augment=False, pixdropout=False),
    "toy": dict(n_joints=1, out_size=16, base_channels=4, out_channels=4, head_channels=4,
                depth_features=8, levels=2, epochs=2, batch_size=2, augment=False,
                pixdropout=False),
    # published epoch counts for the three public benchmarks
    "icvl": dict(n_joints=16, epochs=40),
    "nyu": dict(n_joints=14, epochs=40),
    "msra": dict(n_joints=21, epochs=60),
}


def _convert(name: str, raw: str, ftype):
    if ftype is bool or ftype == "bool":
        return _parse_bool(raw)
    if ftype is tuple or ftype == "tuple":
        return _parse_range(raw)
    if ftype in (int, "int"):
        return int(raw)
    if ftype in (float, "float"):
        return float(raw)
    return raw


def load_train_config(path) -> TrainConfig:
    """Read a config file. ``preset = name`` (if present) supplies base values."""
    entries = read_kv(path)
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    preset = "default"
    for no, key, value, raw in entries:
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"unknown preset {value!r}", no, raw)
            preset = value
            continue
        name = "lam" if key == "lambda" else key
        if name not in fields:
            raise ConfigError(f"unknown key {key!r}", no, raw)
        try:
            values[name] = (_convert(name, value, fields[name].type), no, raw)
        except ValueError as e:
            raise ConfigError(str(e), no, raw) from None
    merged = dict(PRESETS[preset])
    merged.update({k: v for k, (v, _, _) in values.items()})
    try:
        return TrainConfig(**merged)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def preset_config(name: str = "default", **overrides) -> TrainConfig:
    merged = dict(PRESETS[name])
    merged.update(overrides)
    return TrainConfig(**merged)


__all__ = ["ConfigError", "TrainConfig", "PRESETS", "load_train_config", "preset_config", "read_kv"]
