"""Toy image/audio encoders and the per-layer audio Adapters."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .config import ConfigError, StBavaConfig
from .nn import MLP, LayerNorm, Linear, Module, attend, MhCrossAttnWeights
from .tensor import Tensor


def patchify(frames: np.ndarray, p: int) -> np.ndarray:
    """[B, T, 3, H, W] -> [B, T, (H/p)(W/p), 3 p p]."""
    B, T, ch, H, W = frames.shape
    if H % p or W % p:
        raise ConfigError(f"frame size {H}x{W} not divisible by patch {p}")
    x = frames.reshape(B, T, ch, H // p, p, W // p, p)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return np.ascontiguousarray(x.reshape(B, T, (H // p) * (W // p), ch * p * p))


class EncoderLayer(Module):
    """Single-head pre-norm self-attention followed by a pre-norm MLP."""

    def __init__(self, rng, c: int, dtype):
        self.ln1 = LayerNorm(c, dtype)
        self.attn = MhCrossAttnWeights(rng, c, 1, dtype)
        self.ln2 = LayerNorm(c, dtype)
        self.mlp = MLP(rng, [c, 2 * c, c], dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = tn.add(x, attend(self.attn, h, h, x.shape[-1]))
        return tn.add(x, self.mlp(self.ln2(x)))


class Adapter(Module):
    """Two-layer MLP C -> C/4 -> C on the audio embedding, repeated over HW."""

    def __init__(self, rng, c: int, dtype):
        self.mlp = MLP(rng, [c, c // 4, c], dtype)

    def __call__(self, A: Tensor) -> Tensor:
        """[B, T, C] -> [B, T, 1, C]; broadcasting repeats it over HW."""
        y = self.mlp(A)
        return tn.reshape(y, (*y.shape[:-1], 1, y.shape[-1]))


class ToyImageEncoder(Module):
    def __init__(self, rng, cfg: StBavaConfig, dtype):
        c, p = cfg.channels, cfg.patch
        self._patch = p
        self._cfg = cfg
        self.patch_embed = Linear(rng, 3 * p * p, c, dtype)
        self.pos = Tensor(rng.uniform(-0.5, 0.5, size=(cfg.hw, c)).astype(dtype), requires_grad=True)
        self.layers = [EncoderLayer(rng, c, dtype) for _ in range(cfg.encoder_layers)]

    def __call__(self, frames: np.ndarray, adapters: list[Adapter] | None = None, A: Tensor | None = None) -> Tensor:
        """Frames [B, T, 3, H, W] -> embedding [B, T, HW, C].

        With adapters, the j-th adapter output is added to the input of the
        j-th layer (i.e. to the output of the previous stage).
        """
        x = Tensor(patchify(frames, self._patch).astype(self.pos.dtype))
        if x.shape[2] != self.pos.shape[0]:
            raise ConfigError(f"frames give {x.shape[2]} patches, encoder expects {self.pos.shape[0]}")
        x = tn.add(self.patch_embed(x), self.pos)
        for j, layer in enumerate(self.layers):
            if adapters:
                x = tn.add(x, adapters[j](A))
            x = layer(x)
        return x


class ToyAudioEncoder(Module):
    """Per-second projection + two-layer MLP, then the always-trainable output linear."""

    def __init__(self, rng, cfg: StBavaConfig, dtype):
        hs, ws = cfg.spec_size
        self._spec = (hs, ws)
        ca = cfg.audio_hidden
        self.proj = Linear(rng, hs * ws, ca, dtype)
        self.mlp = MLP(rng, [ca, ca, ca], dtype)
        self.out = Linear(rng, ca, cfg.channels, dtype)

    def frozen_names(self, prefix: str) -> list[str]:
        return [n for n, _ in self.named_params(prefix) if not n.startswith(prefix + "out.")]

    def __call__(self, specs: np.ndarray) -> tuple[Tensor, Tensor]:
        """Spectrograms [B, T, Hs, Ws] -> ``(A, A0)``, both [B, T, C]; ``A0`` is ``A`` itself."""
        if tuple(specs.shape[-2:]) != self._spec:
            raise ConfigError(f"spectrogram size {tuple(specs.shape[-2:])} != configured {self._spec}")
        B, T = specs.shape[:2]
        s = Tensor(specs.reshape(B, T, -1).astype(self.out.w.dtype))
        h = tn.gelu(self.proj(s))
        h = tn.gelu(self.mlp(h))
        A = self.out(h)
        return A, A


def encode_image(encoder: ToyImageEncoder, frames: np.ndarray, adapters=None, A: Tensor | None = None) -> Tensor:
    """Accepts [T, 3, H, W] or batched frames; returns [T, HW, C] or [B, T, HW, C]."""
    single = frames.ndim == 4
    if single:
        frames = frames[None]
        if A is not None and A.ndim == 2:
            A = tn.reshape(A, (1, *A.shape))
    out = encoder(frames, adapters, A)
    return tn.reshape(out, out.shape[1:]) if single else out


def encode_audio(encoder: ToyAudioEncoder, specs: np.ndarray) -> tuple[Tensor, Tensor]:
    single = specs.ndim == 3
    A, A0 = encoder(specs[None] if single else specs)
    if single:
        A = tn.reshape(A, A.shape[1:])
        return A, A
    return A, A0


def adapter_inject(adapter: Adapter, A: Tensor, hw: int) -> Tensor:
    """Adapter prompt for one encoder layer, explicitly repeated: [T, C] -> [T, HW, C]."""
    y = adapter.mlp(A)
    lead = y.shape[:-1]
    y = tn.reshape(y, (*lead, 1, y.shape[-1]))
    return tn.expand(y, (*lead, hw, y.shape[-1]))
