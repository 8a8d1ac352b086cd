"""Synthetic audio-visual clips and on-disk datasets.

Clips contain flat-coloured shapes moving on a plain background. Each shape
belongs to a category with a fixed look and a fixed spectrogram signature (a
band of frequency rows), so the audio-to-object association is learnable the
same way instrument sounds map to instrument appearance.

Modes
-----
single
    One object that sounds every second.
multi
    Two or three objects of distinct categories, each with its own on/off
    schedule. The mask is the union of the sounding objects.
temporal
    Two identical objects (same category, same size) in the left and right
    halves, moving vertically in opposite directions. Exactly one sounds for
    the whole clip and its loudness is an affine function of its vertical
    position with a per-clip random offset, so a single (frame, spectrogram)
    pair does not reveal which object is the sounder; the loudness trend
    over the clip does.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import StBavaConfig
from .io import read_tensor, write_tensor

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MODES = ("single", "multi", "temporal")
NOISE = 0.05
AMP_RANGE = (0.4, 1.0)
RADIUS_RANGE = (6.0, 14.0)
MULTI_RADIUS_RANGE = (5.0, 11.0)
MAX_ATTEMPTS = 16
PLACE_TRIES = 8  # per-object redraws inside one attempt (multi mode)
# temporal mode: loudness slope per pixel of vertical position
TEMPORAL_GAIN = 0.03
TEMPORAL_SPEED = (4.0, 5.0)
TEMPORAL_LEVEL = (0.4, 3.2)

CATEGORIES = [
    ("disc", (0.90, 0.20, 0.20)),
    ("rectangle", (0.20, 0.80, 0.30)),
    ("triangle", (0.25, 0.35, 0.95)),
    ("disc", (0.95, 0.85, 0.20)),
    ("rectangle", (0.85, 0.25, 0.85)),
    ("triangle", (0.20, 0.85, 0.90)),
]


class GenerationError(RuntimeError):
    pass


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 stream; ``uniforms`` is the vectorised equivalent of repeated ``uniform``."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.next_u64() % (hi - lo + 1)

    def bit(self) -> int:
        return self.next_u64() >> 63

    def uniforms(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def clip_stream(seed: int, index: int) -> SplitMix64:
    return SplitMix64(_mix64((int(seed) * GOLDEN + _mix64(int(index) + 1)) & MASK64))


@dataclass
class ObjectSpec:
    category: int
    kind: str
    color: tuple
    radius: float
    start: tuple  # (x, y) centre at t=0
    velocity: tuple  # pixels per second
    signature: tuple  # spectrogram rows
    schedule: list  # per-second on/off
    amplitude: list  # per-second loudness

    def center(self, t: int) -> tuple[float, float]:
        return self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t

    @property
    def extent(self) -> float:
        return self.radius * (1.42 if self.kind == "rectangle" else 1.0)

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "kind": self.kind,
            "radius": self.radius,
            "start": list(self.start),
            "velocity": list(self.velocity),
            "schedule": [int(s) for s in self.schedule],
            "amplitude": [float(a) for a in self.amplitude],
        }


@dataclass
class AvClip:
    frames: np.ndarray  # [T, 3, H, W] float32 in [0, 1]
    specs: np.ndarray  # [T, Hs, Ws] float32 >= 0
    masks: np.ndarray  # [T, H, W] uint8 in {0, 1}
    meta: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


def signature_rows(category: int, spec_h: int) -> tuple[int, ...]:
    band = spec_h // len(CATEGORIES)
    lo = category * band + band // 8
    hi = (category + 1) * band - band // 8
    return tuple(range(lo, hi))


def render_mask(kind: str, cx: float, cy: float, r: float, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5 - cx, ys + 0.5 - cy
    if kind == "disc":
        m = px * px + py * py <= r * r
    elif kind == "rectangle":
        m = (np.abs(px) <= r) & (np.abs(py) <= 0.75 * r)
    elif kind == "triangle":
        # upward isosceles triangle with circumradius-ish extent r
        m = (py <= 0.8 * r) & (py >= -r) & (np.abs(px) <= (py + r) * 0.6)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return m


def _fits(obj: ObjectSpec, frames: int, size) -> bool:
    h, w = size
    for t in range(frames):
        x, y = obj.center(t)
        e = obj.extent
        if x - e < 0 or x + e > w or y - e < 0 or y + e > h:
            return False
    return True


def _apart(a: ObjectSpec, b: ObjectSpec, frames: int) -> bool:
    for t in range(frames):
        (ax, ay), (bx, by) = a.center(t), b.center(t)
        if np.hypot(ax - bx, ay - by) <= a.extent + b.extent + 1.0:
            return False
    return True


def _free_object(rng: SplitMix64, category: int, cfg: StBavaConfig, schedule, amplitude, radius=RADIUS_RANGE) -> ObjectSpec:
    """Object whose whole linear trajectory stays inside the canvas."""
    kind, color = CATEGORIES[category]
    h, w = cfg.image_size
    r = rng.uniform(*radius)
    e = r * (1.42 if kind == "rectangle" else 1.0)
    vel = (rng.uniform(-3, 3), rng.uniform(-3, 3))
    span = cfg.frames - 1
    start = []
    for v, size in zip(vel, (w, h)):
        lo = e - min(0.0, v * span)
        hi = size - e - max(0.0, v * span)
        start.append(rng.uniform(lo, max(lo, hi)))
    return ObjectSpec(category, kind, color, r, tuple(start), vel, signature_rows(category, cfg.spec_size[0]), schedule, amplitude)


def _sample_objects(mode: str, rng: SplitMix64, cfg: StBavaConfig) -> tuple[list[ObjectSpec], dict]:
    T = cfg.frames
    h, w = cfg.image_size
    ncat = len(CATEGORIES)
    if mode == "single":
        cat = rng.randint(0, ncat - 1)
        amp = [rng.uniform(*AMP_RANGE) for _ in range(T)]
        return [_free_object(rng, cat, cfg, [1] * T, amp)], {}
    if mode == "multi":
        n = rng.randint(2, 3)
        cats: list[int] = []
        while len(cats) < n:
            c = rng.randint(0, ncat - 1)
            if c not in cats:
                cats.append(c)
        objs = []
        for c in cats:
            sched = [int(rng.uniform() < 0.6) for _ in range(T)]
            amp = [rng.uniform(*AMP_RANGE) if s else 0.0 for s in sched]
            # redraw just this object while it collides with the ones already placed
            for _ in range(PLACE_TRIES):
                o = _free_object(rng, c, cfg, sched, amp, MULTI_RADIUS_RANGE)
                if all(_apart(o, p, T) for p in objs):
                    break
            objs.append(o)
        return objs, {}
    if mode == "temporal":
        cat = rng.randint(0, ncat - 1)
        kind, color = CATEGORIES[cat]
        r = rng.uniform(6.0, 10.0)
        e = r * (1.42 if kind == "rectangle" else 1.0)
        speed = rng.uniform(*TEMPORAL_SPEED)
        direction = 1.0 if rng.bit() else -1.0
        sounder = int(rng.bit())
        span = speed * (T - 1) / 2
        mid = (T - 1) / 2
        objs = []
        for side, vy in ((0, direction * speed), (1, -direction * speed)):
            x = rng.uniform(e, w / 2 - e - 1) + side * w / 2
            ybar = rng.uniform(e + span, h - e - span)
            objs.append(
                ObjectSpec(cat, kind, color, r, (x, ybar - vy * mid), (0.0, vy), signature_rows(cat, cfg.spec_size[0]), [0] * T, [0.0] * T)
            )
        level = rng.uniform(*TEMPORAL_LEVEL)
        s = objs[sounder]
        s.schedule = [1] * T
        s.amplitude = [level + TEMPORAL_GAIN * (s.center(t)[1] - (s.start[1] + s.velocity[1] * mid)) for t in range(T)]
        return objs, {"sounder": sounder, "direction": direction}
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def generate_clip(mode: str, seed: int, cfg: StBavaConfig | None = None, index: int = 0) -> AvClip:
    """Deterministic clip for ``(mode, seed, index, cfg)``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = cfg or StBavaConfig()
    rng = clip_stream(seed, index)
    T = cfg.frames
    for _ in range(MAX_ATTEMPTS):
        objs, extra = _sample_objects(mode, rng, cfg)
        if all(_fits(o, T, cfg.image_size) for o in objs) and all(
            _apart(objs[i], objs[j], T) for i in range(len(objs)) for j in range(i + 1, len(objs))
        ):
            break
    else:
        raise GenerationError(f"objects never fit the canvas after {MAX_ATTEMPTS} attempts (mode={mode}, seed={seed}, index={index})")

    h, w = cfg.image_size
    hs, ws = cfg.spec_size
    bg = np.array([rng.uniform(0.0, 0.3) for _ in range(3)])
    frames = np.empty((T, 3, h, w), dtype=np.float32)
    masks = np.zeros((T, h, w), dtype=np.uint8)
    noise = rng.uniforms(T * hs * ws).reshape(T, hs, ws) * NOISE
    specs = noise.astype(np.float32)
    for t in range(T):
        img = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
        for o in objs:
            cx, cy = o.center(t)
            m = render_mask(o.kind, cx, cy, o.radius, (h, w))
            img[:, m] = np.asarray(o.color)[:, None]
            if o.schedule[t]:
                masks[t][m] = 1
                specs[t, list(o.signature), :] += np.float32(o.amplitude[t])
        frames[t] = img
    meta = {"mode": mode, "seed": int(seed), "index": int(index), "objects": [o.to_dict() for o in objs], **extra}
    return AvClip(frames, specs, masks, meta)


def split_of(k: int, n: int) -> str:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    if k < n_train:
        return "train"
    if k < n_train + n_val:
        return "val"
    return "test"


def build_dataset(out_dir, n_clips: int, mode: str, seed: int, cfg: StBavaConfig | None = None) -> dict:
    cfg = cfg or StBavaConfig()
    os.makedirs(out_dir, exist_ok=True)
    clips = []
    for k in range(n_clips):
        clip = generate_clip(mode, seed, cfg, index=k)
        cid = f"clip_{k:05d}"
        d = os.path.join(out_dir, cid)
        os.makedirs(d, exist_ok=True)
        paths = {}
        for name in ("frames", "specs", "masks"):
            rel = f"{cid}/{name}.stbt"
            try:
                write_tensor(os.path.join(out_dir, rel), getattr(clip, name))
            except OSError as exc:
                raise OSError(f"cannot write {os.path.join(out_dir, rel)}: {exc.strerror}") from exc
            paths[name] = rel
        with open(os.path.join(d, "meta.json"), "w") as fh:
            json.dump(clip.meta, fh, sort_keys=True)
        clips.append({"id": cid, "split": split_of(k, n_clips), "paths": paths})
    manifest = {
        "version": 1,
        "mode": mode,
        "seed": int(seed),
        "frames": cfg.frames,
        "image_size": list(cfg.image_size),
        "spec_size": list(cfg.spec_size),
        "clips": clips,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"manifest not found: {path}") from exc


def load_clip(data_dir, entry: dict) -> AvClip:
    arrs = {name: read_tensor(os.path.join(data_dir, entry["paths"][name])) for name in ("frames", "specs", "masks")}
    meta_path = os.path.join(data_dir, entry["id"], "meta.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    meta["id"] = entry["id"]
    return AvClip(arrs["frames"], arrs["specs"], arrs["masks"], meta)


def load_split(data_dir, split: str | None) -> list[AvClip]:
    man = read_manifest(data_dir)
    return [load_clip(data_dir, e) for e in man["clips"] if split is None or e["split"] == split]
