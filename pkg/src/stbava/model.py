"""The full pipeline: encoders -> ST-BAVA -> two-way decoder -> BCE."""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .attention import AttentionRecord, StBavaStack
from .backbones import Adapter, ToyAudioEncoder, ToyImageEncoder
from .config import ConfigError, StBavaConfig
from .decoder import MaskDecoder
from .nn import Module
from .tensor import Tensor


class AvsModel(Module):
    def __init__(self, cfg: StBavaConfig, seed: int | None = None):
        cfg.validate()
        self._cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.image_encoder = ToyImageEncoder(rng, cfg, dtype)
        self.audio_encoder = ToyAudioEncoder(rng, cfg, dtype)
        self.adapters = [] if cfg.no_adapter else [Adapter(rng, cfg.channels, dtype) for _ in range(cfg.encoder_layers)]
        self.stbava = StBavaStack(rng, cfg, dtype)
        self.decoder = MaskDecoder(rng, cfg, dtype)
        for name, p in self.named_params():
            p.name = name

    @property
    def cfg(self) -> StBavaConfig:
        return self._cfg

    def params(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def frozen_names(self) -> set[str]:
        if self._cfg.unfreeze_encoders:
            return set()
        names = {n for n, _ in self.image_encoder.named_params("image_encoder.")}
        names |= set(self.audio_encoder.frozen_names("audio_encoder."))
        return names

    def trainable(self) -> dict[str, Tensor]:
        frozen = self.frozen_names()
        return {n: p for n, p in self.named_params() if n not in frozen}

    def param_count(self, trainable_only: bool = False) -> int:
        ps = self.trainable() if trainable_only else self.params()
        return int(sum(p.data.size for p in ps.values()))

    def set_requires_grad(self) -> None:
        frozen = self.frozen_names()
        for n, p in self.named_params():
            p.requires_grad = n not in frozen

    def check_inputs(self, frames: np.ndarray, specs: np.ndarray) -> None:
        cfg = self._cfg
        H, W = cfg.image_size
        hs, ws = cfg.spec_size
        if frames.ndim != 5 or frames.shape[1:] != (cfg.frames, 3, H, W):
            raise ConfigError(f"frames dims {list(frames.shape)} do not match [B, {cfg.frames}, 3, {H}, {W}]")
        if specs.ndim != 4 or specs.shape[1:] != (cfg.frames, hs, ws) or specs.shape[0] != frames.shape[0]:
            raise ConfigError(f"specs dims {list(specs.shape)} do not match [B, {cfg.frames}, {hs}, {ws}]")

    def encode(self, frames: np.ndarray, specs: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        A, A0 = self.audio_encoder(specs)
        V = self.image_encoder(frames, self.adapters or None, A)
        return V, A, A0

    def forward(self, frames: np.ndarray, specs: np.ndarray) -> tuple[Tensor, AttentionRecord]:
        """Batched clips: frames [B, T, 3, H, W], specs [B, T, Hs, Ws] -> logits [B, T, H, W]."""
        self.check_inputs(frames, specs)
        V, A, _ = self.encode(frames, specs)
        dense, sparse, record = self.stbava(V, A)
        logits = self._decode(V, dense, sparse)
        return logits, record

    def _decode(self, V: Tensor, dense: Tensor, sparse: Tensor) -> Tensor:
        B, T, P, C = V.shape
        out = self.decoder(tn.reshape(V, (B * T, P, C)), tn.reshape(dense, (B * T, P, C)), tn.reshape(sparse, (B * T, C)))
        return tn.reshape(out, (B, T, *out.shape[1:]))

    def loss(self, frames, specs, masks) -> tuple[Tensor, Tensor, AttentionRecord]:
        logits, record = self.forward(frames, specs)
        return tn.bce_with_logits(logits, masks), logits, record

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"checkpoint tensors do not match model: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, p in own.items():
            if state[n].shape != p.data.shape:
                raise ConfigError(f"tensor {n}: checkpoint dims {list(state[n].shape)} != model {p.dims}")
            p.data = np.array(state[n], dtype=p.data.dtype)


def forward_clip(clip, model: AvsModel):
    """``(logits [T, H, W], loss, record)`` for a single clip."""
    loss, logits, record = model.loss(clip.frames[None], clip.specs[None], clip.masks[None])
    return tn.reshape(logits, logits.shape[1:]), loss, record.clip(0)
