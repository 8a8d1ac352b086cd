from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

ORDERS = ("temporal-first", "spatial-first")


class ConfigError(ValueError):
    pass


@dataclass
class StBavaConfig:
    """Hyperparameters and ablation switches for the whole pipeline."""

    frames: int = 5
    image_size: tuple[int, int] = (64, 64)
    spec_size: tuple[int, int] = (96, 64)
    patch: int = 8
    channels: int = 64
    heads: int = 4
    depth: int = 5
    encoder_layers: int = 4
    audio_hidden: int = 128
    order: str = "temporal-first"
    no_temporal: bool = False
    no_bidirectional: bool = False
    no_adapter: bool = False
    unfreeze_encoders: bool = False
    two_phase: bool = False
    lr: float = 1e-4
    epochs: int = 30
    batch: int = 4
    seed: int = 0
    threshold: float = 0.5
    clip_norm: float = 5.0
    upsample: str = "subpixel"
    dtype: str = "float32"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.spec_size = tuple(int(v) for v in self.spec_size)
        self.validate()

    def validate(self) -> "StBavaConfig":
        if self.channels <= 0 or self.heads <= 0 or self.channels % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.channels % 8:
            raise ConfigError(f"channels ({self.channels}) must be a multiple of 8")
        if self.depth < 1:
            raise ConfigError("depth L must be >= 1")
        if self.frames < 1 or self.encoder_layers < 1:
            raise ConfigError("frames and encoder_layers must be >= 1")
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.upsample not in ("bilinear", "subpixel"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def hw(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def replace(self, **kw) -> "StBavaConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["spec_size"] = list(self.spec_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StBavaConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Ablation rows, expressed as flag sets on top of any base config.
ABLATIONS = {
    "full": {},
    "no_temporal": {"no_temporal": True},
    "no_bidirectional": {"no_bidirectional": True},
    "no_adapter": {"no_adapter": True},
    "baseline": {"no_temporal": True, "no_bidirectional": True, "no_adapter": True},
}


def preset(name: str = "single", **overrides) -> StBavaConfig:
    """``single`` uses depth 5, ``multi`` depth 7; ``gradcheck`` is the reduced 64-bit preset."""
    base = {
        "single": dict(depth=5),
        "multi": dict(depth=7),
        "gradcheck": dict(depth=2, channels=32, dtype="float64"),
    }
    if name not in base:
        raise ConfigError(f"unknown preset {name!r}")
    kw = {**base[name], **overrides}
    return StBavaConfig(**kw)


def ablation(cfg: StBavaConfig, row: str) -> StBavaConfig:
    if row not in ABLATIONS:
        raise ConfigError(f"unknown ablation row {row!r}")
    return cfg.replace(**ABLATIONS[row])
