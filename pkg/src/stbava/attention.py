"""Spatio-temporal bidirectional audio-visual attention (ST-BAVA).

Streams are batched: visual ``V`` is [B, T, HW, C] and audio ``A`` is
[B, T, C]. Unbatched inputs ([T, HW, C] / [T, C]) are accepted by the public
update functions and returned unbatched.

Shape matching between the streams follows the pool/repeat rule: when audio
is the query the visual keys are mean-pooled over HW (temporal) or taken per
position (spatial); when visual is the query the audio keys are shared by
every position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import ConfigError, StBavaConfig
from .nn import LayerNorm, MhCrossAttnWeights, Module, merge_heads, split_heads
from .tensor import ShapeError, Tensor


@dataclass
class AttentionRecord:
    """Head-averaged attention maps captured during one forward pass.

    Each block entry may hold ``alpha_time`` [B, HW, T, T] and ``alpha_space``
    [B, T, HW, 1] (visual-query maps), plus ``audio_alpha_time`` [B, 1, T, T]
    and ``audio_alpha_space`` [B, T, HW, 1] (audio-query maps). ``pre`` is the
    raw projection-free score map of the backbone features, [B, T, HW, 1].
    """

    blocks: list[dict] = field(default_factory=list)
    pre: np.ndarray | None = None

    def clip(self, b: int) -> "AttentionRecord":
        return AttentionRecord(
            [{k: v[b] for k, v in blk.items()} for blk in self.blocks],
            None if self.pre is None else self.pre[b],
        )

    def maps(self) -> dict[str, np.ndarray]:
        out = {} if self.pre is None else {"pre.alpha_space": self.pre}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.items():
                out[f"block{i}.{k}"] = v
        return out


def _check_streams(V: Tensor, A: Tensor) -> None:
    if V.ndim != 4 or A.ndim != 3:
        raise ShapeError(f"expected V [B,T,HW,C] and A [B,T,C], got {V.dims} and {A.dims}")
    b, t, _, c = V.shape
    if A.shape != (b, t, c):
        raise ShapeError(f"stream mismatch: V {V.dims} vs A {A.dims}")


def _batch(x: Tensor, want: int) -> tuple[Tensor, bool]:
    if x is None:
        return None, False
    if x.ndim == want - 1:
        return tn.reshape(x, (1, *x.shape)), True
    return x, False


def _unbatch(x: Tensor, flag: bool) -> Tensor:
    return tn.reshape(x, x.shape[1:]) if flag else x


def _with_pos(x: Tensor, pos: Tensor | None) -> Tensor:
    return x if pos is None else tn.add(x, pos)


def visual_temporal(V, A, w, ln_v, ln_a, pos=None):
    """Each pixel attends over time to the audio sequence; scores [B, HW, T, T]."""
    _check_streams(V, A)
    B, T, P, C = V.shape
    h = w.heads
    d = C // h
    q = w.q(ln_v(V))  # B,T,P,C
    q = tn.permute(tn.reshape(q, (B, T, P, h, d)), (0, 2, 3, 1, 4))  # B,P,h,T,d
    a_in = _with_pos(ln_a(A), pos)
    k = tn.reshape(split_heads(w.k(a_in), h), (B, 1, h, T, d))
    v = tn.reshape(split_heads(w.v(a_in), h), (B, 1, h, T, d))
    alpha = tn.softmax_axis(tn.matmul(q, tn.swapaxes(k, -1, -2)), axis=-1, scale=1.0 / math.sqrt(C))  # B,P,h,T,T
    out = tn.matmul(alpha, v)  # B,P,h,T,d
    out = tn.reshape(tn.permute(out, (0, 3, 1, 2, 4)), (B, T, P, C))
    return tn.add(V, w.o(out)), alpha.data.mean(axis=2)


def audio_temporal(A, V, w, ln_a, ln_v, pos=None):
    """Each audio step attends over time to the HW-pooled visual stream; scores [B, 1, T, T]."""
    _check_streams(V, A)
    C = A.shape[-1]
    q = split_heads(w.q(_with_pos(ln_a(A), pos)), w.heads)  # B,h,T,d
    pooled = tn.mean(ln_v(V), axis=2)  # B,T,C
    k = split_heads(w.k(pooled), w.heads)
    v = split_heads(w.v(pooled), w.heads)
    alpha = tn.softmax_axis(tn.matmul(q, tn.swapaxes(k, -1, -2)), axis=-1, scale=1.0 / math.sqrt(C))  # B,h,T,T
    out = merge_heads(tn.matmul(alpha, v))
    return tn.add(A, w.o(out)), alpha.data.mean(axis=1, keepdims=True)


def audio_spatial(A, V, w, ln_a, ln_v, pos=None):
    """Per time step the audio token attends over the HW positions; map [B, T, HW, 1]."""
    _check_streams(V, A)
    B, T, P, C = V.shape
    h = w.heads
    d = C // h
    q = tn.reshape(w.q(_with_pos(ln_a(A), pos)), (B, T, h, 1, d))
    kv_in = ln_v(V)
    k = tn.permute(tn.reshape(w.k(kv_in), (B, T, P, h, d)), (0, 1, 3, 4, 2))  # B,T,h,d,P
    v = tn.permute(tn.reshape(w.v(kv_in), (B, T, P, h, d)), (0, 1, 3, 2, 4))  # B,T,h,P,d
    alpha = tn.softmax_axis(tn.matmul(q, k), axis=-1, scale=1.0 / math.sqrt(C))  # B,T,h,1,P
    out = tn.reshape(tn.matmul(alpha, v), (B, T, C))
    amap = np.swapaxes(alpha.data.mean(axis=2), -1, -2)  # B,T,P,1
    return tn.add(A, w.o(out)), amap


def visual_spatial(V, A, w, ln_v, ln_a, pos=None):
    """Spatial map (softmax over HW) gates the projected audio value injected at each pixel.

    The gate is ``HW * alpha`` so a uniform map reduces to a plain broadcast.
    """
    _check_streams(V, A)
    B, T, P, C = V.shape
    h = w.heads
    d = C // h
    q = tn.permute(tn.reshape(w.q(ln_v(V)), (B, T, P, h, d)), (0, 1, 3, 2, 4))  # B,T,h,P,d
    a_in = _with_pos(ln_a(A), pos)
    k = tn.reshape(w.k(a_in), (B, T, h, d, 1))
    v = tn.reshape(w.v(a_in), (B, T, h, 1, d))
    alpha = tn.softmax_axis(tn.matmul(q, k), axis=-2, scale=1.0 / math.sqrt(C))  # B,T,h,P,1
    out = tn.matmul(tn.scale(alpha, float(P)), v)  # B,T,h,P,d
    out = tn.reshape(tn.permute(out, (0, 1, 3, 2, 4)), (B, T, P, C))
    return tn.add(V, w.o(out)), alpha.data.mean(axis=2)


def temporal_attention_update(query_stream, key_stream, weights, ln_query, ln_key, pos=None):
    """Temporal cross-attention; the direction follows from the query's rank.

    ``pos`` is the audio positional encoding, added to the normalised audio
    stream wherever it is projected. Returns ``(updated_query, alpha)``.
    """
    if query_stream.ndim in (3, 4) and key_stream.ndim == query_stream.ndim - 1:
        V, bv = _batch(query_stream, 4)
        A, _ = _batch(key_stream, 3)
        P, _ = _batch(pos, 3)
        out, alpha = visual_temporal(V, A, weights, ln_query, ln_key, P)
        return _unbatch(out, bv), alpha[0] if bv else alpha
    if query_stream.ndim in (2, 3) and key_stream.ndim == query_stream.ndim + 1:
        A, ba = _batch(query_stream, 3)
        V, _ = _batch(key_stream, 4)
        P, _ = _batch(pos, 3)
        out, alpha = audio_temporal(A, V, weights, ln_query, ln_key, P)
        return _unbatch(out, ba), alpha[0] if ba else alpha
    raise ShapeError(f"cannot pair query {query_stream.dims} with key {key_stream.dims}")


def spatial_attention_update(query_stream, key_stream, weights, ln_query, ln_key, pos=None):
    """Spatial cross-attention per time step; see :func:`temporal_attention_update`."""
    if query_stream.ndim in (3, 4) and key_stream.ndim == query_stream.ndim - 1:
        V, bv = _batch(query_stream, 4)
        A, _ = _batch(key_stream, 3)
        P, _ = _batch(pos, 3)
        out, alpha = visual_spatial(V, A, weights, ln_query, ln_key, P)
        return _unbatch(out, bv), alpha[0] if bv else alpha
    if query_stream.ndim in (2, 3) and key_stream.ndim == query_stream.ndim + 1:
        A, ba = _batch(query_stream, 3)
        V, _ = _batch(key_stream, 4)
        P, _ = _batch(pos, 3)
        out, alpha = audio_spatial(A, V, weights, ln_query, ln_key, P)
        return _unbatch(out, ba), alpha[0] if ba else alpha
    raise ShapeError(f"cannot pair query {query_stream.dims} with key {key_stream.dims}")


class StBavaBlock(Module):
    """One bidirectional block: audio stream updated first, then the visual stream.

    Sub-attentions disabled by the config own no weights, so ablated models
    have genuinely fewer parameters.
    """

    def __init__(self, rng, cfg: StBavaConfig, dtype):
        c, h = cfg.channels, cfg.heads
        if c % h:
            raise ConfigError(f"heads ({h}) must divide channels ({c})")
        self._cfg = cfg
        if not cfg.no_bidirectional:
            if not cfg.no_temporal:
                self.audio_temporal = MhCrossAttnWeights(rng, c, h, dtype)
            self.audio_spatial = MhCrossAttnWeights(rng, c, h, dtype)
        if not cfg.no_temporal:
            self.visual_temporal = MhCrossAttnWeights(rng, c, h, dtype)
        self.visual_spatial = MhCrossAttnWeights(rng, c, h, dtype)
        self.ln_audio_t = LayerNorm(c, dtype)
        self.ln_audio_s = LayerNorm(c, dtype)
        self.ln_visual_t = LayerNorm(c, dtype)
        self.ln_visual_s = LayerNorm(c, dtype)

    def __call__(self, V: Tensor, A: Tensor, A0: Tensor) -> tuple[Tensor, Tensor, dict]:
        cfg = self._cfg
        rec: dict = {}
        temporal_first = cfg.order == "temporal-first"
        if not cfg.no_bidirectional:
            steps = ["t", "s"] if temporal_first else ["s", "t"]
            for s in steps:
                if s == "t" and not cfg.no_temporal:
                    A, rec["audio_alpha_time"] = audio_temporal(A, V, self.audio_temporal, self.ln_audio_t, self.ln_visual_t, A0)
                elif s == "s":
                    A, rec["audio_alpha_space"] = audio_spatial(A, V, self.audio_spatial, self.ln_audio_s, self.ln_visual_s, A0)
        steps = ["t", "s"] if temporal_first else ["s", "t"]
        for s in steps:
            if s == "t" and not cfg.no_temporal:
                V, rec["alpha_time"] = visual_temporal(V, A, self.visual_temporal, self.ln_visual_t, self.ln_audio_t, A0)
            elif s == "s":
                V, rec["alpha_space"] = visual_spatial(V, A, self.visual_spatial, self.ln_visual_s, self.ln_audio_s, A0)
        return V, A, rec


def raw_score_map(V: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Projection-free spatial map softmax_HW(V . A / sqrt(C)), [B, T, HW, 1]."""
    c = V.shape[-1]
    s = np.einsum("btpc,btc->btp", V, A) / math.sqrt(c)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True))[..., None]


class StBavaStack(Module):
    def __init__(self, rng, cfg: StBavaConfig, dtype):
        self.blocks = [StBavaBlock(rng, cfg, dtype) for _ in range(cfg.depth)]

    def __call__(self, V: Tensor, A: Tensor) -> tuple[Tensor, Tensor, AttentionRecord]:
        record = AttentionRecord(pre=raw_score_map(V.data, A.data))
        A0 = A
        for blk in self.blocks:
            V, A, rec = blk(V, A, A0)
            record.blocks.append(rec)
        return V, A, record


def stbava_block(V: Tensor, A: Tensor, A0: Tensor, block: StBavaBlock):
    """Functional wrapper: ``(V', A')`` for one block."""
    Vb, bv = _batch(V, 4)
    Ab, _ = _batch(A, 3)
    A0b, _ = _batch(A0, 3)
    V2, A2, _ = block(Vb, Ab, A0b)
    return _unbatch(V2, bv), _unbatch(A2, bv)


def stbava_stack(V: Tensor, A: Tensor, stack: StBavaStack):
    """``(audio-queried visual, visually-queried audio, record)`` after all blocks, with ``A0 = A`` threaded through."""
    Vb, bv = _batch(V, 4)
    Ab, _ = _batch(A, 3)
    V2, A2, rec = stack(Vb, Ab)
    if bv:
        rec = rec.clip(0)
    return _unbatch(V2, bv), _unbatch(A2, bv), rec
