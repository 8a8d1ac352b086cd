"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .config import ConfigError, StBavaConfig


def as_clip_arrays(X) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(frames, specs)`` or a sequence of clips; return float arrays."""
    if isinstance(X, tuple) and len(X) == 2:
        frames, specs = X
    else:
        X = list(X)
        if not X or not hasattr(X[0], "frames"):
            raise ConfigError("X must be a (frames, specs) pair or a sequence of clips")
        frames = np.stack([c.frames for c in X])
        specs = np.stack([c.specs for c in X])
    frames = np.asarray(frames, dtype=np.float32)
    specs = np.asarray(specs, dtype=np.float32)
    if not (np.isfinite(frames).all() and np.isfinite(specs).all()):
        raise ConfigError("inputs contain NaN or Inf")
    return frames, specs


def check_clip_arrays(frames: np.ndarray, specs: np.ndarray, cfg: StBavaConfig) -> None:
    H, W = cfg.image_size
    hs, ws = cfg.spec_size
    if frames.ndim != 5 or frames.shape[1:] != (cfg.frames, 3, H, W):
        raise ConfigError(f"frames dims {list(frames.shape)} do not match [N, {cfg.frames}, 3, {H}, {W}]")
    if specs.shape != (frames.shape[0], cfg.frames, hs, ws):
        raise ConfigError(f"specs dims {list(specs.shape)} do not match [{frames.shape[0]}, {cfg.frames}, {hs}, {ws}]")


def check_masks(masks, n: int, cfg: StBavaConfig) -> np.ndarray:
    masks = np.asarray(masks)
    H, W = cfg.image_size
    if masks.shape != (n, cfg.frames, H, W):
        raise ConfigError(f"mask dims {list(masks.shape)} do not match [{n}, {cfg.frames}, {H}, {W}]")
    if not np.isin(masks, (0, 1)).all():
        raise ConfigError("masks must be binary")
    return masks.astype(np.uint8)
