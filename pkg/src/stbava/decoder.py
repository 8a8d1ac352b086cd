"""Two-way mask decoder: the audio-queried visual embedding is the dense prompt, the visually-queried audio the sparse prompt.

Frames are decoded independently: a clip of T frames is flattened into
B*T rows and no state crosses rows.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .config import StBavaConfig
from .nn import MLP, LayerNorm, Linear, MhCrossAttnWeights, Module, attend, uniform
from .tensor import ShapeError, Tensor

UPSCALE = 4


class TwoWayBlock(Module):
    def __init__(self, rng, c: int, dtype):
        self.ln_self = LayerNorm(c, dtype)
        self.self_attn = MhCrossAttnWeights(rng, c, 1, dtype)
        self.ln_t2i_tok = LayerNorm(c, dtype)
        self.ln_t2i_img = LayerNorm(c, dtype)
        self.t2i = MhCrossAttnWeights(rng, c, 1, dtype)
        self.ln_i2t_img = LayerNorm(c, dtype)
        self.ln_i2t_tok = LayerNorm(c, dtype)
        self.i2t = MhCrossAttnWeights(rng, c, 1, dtype)

    def __call__(self, tokens: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        c = tokens.shape[-1]
        h = self.ln_self(tokens)
        tokens = tn.add(tokens, attend(self.self_attn, h, h, c))
        tokens = tn.add(tokens, attend(self.t2i, self.ln_t2i_tok(tokens), self.ln_t2i_img(image), c))
        image = tn.add(image, attend(self.i2t, self.ln_i2t_img(image), self.ln_i2t_tok(tokens), c))
        return tokens, image


class MaskDecoder(Module):
    def __init__(self, rng, cfg: StBavaConfig, dtype):
        c = cfg.channels
        self._cfg = cfg
        self.mask_token = uniform(rng, (c,), math.sqrt(1.0 / c), dtype)
        self.blocks = [TwoWayBlock(rng, c, dtype) for _ in range(2)]
        self.ln_out = LayerNorm(c, dtype)
        width = c // 8 * (UPSCALE * UPSCALE if cfg.upsample == "subpixel" else 1)
        self.upscale = Linear(rng, c, width, dtype)
        self.hyper = MLP(rng, [c, c, c, c // 8], dtype)

    def _upsample(self, image: Tensor) -> Tensor:
        """[N, HW, C] -> [N, C/8, 4h, 4w]."""
        cfg = self._cfg
        gh, gw = cfg.grid
        n = image.shape[0]
        c8 = cfg.channels // 8
        x = self.upscale(self.ln_out(image))
        if cfg.upsample == "subpixel":
            x = tn.reshape(x, (n, gh, gw, UPSCALE, UPSCALE, c8))
            x = tn.permute(x, (0, 5, 1, 3, 2, 4))
            x = tn.reshape(x, (n, c8, gh * UPSCALE, gw * UPSCALE))
        else:
            x = tn.reshape(tn.permute(x, (0, 2, 1)), (n, c8, gh, gw))
            x = tn.bilinear_upsample(x, UPSCALE)
        return tn.gelu(x)

    def __call__(self, image_emb: Tensor, dense: Tensor, sparse: Tensor) -> Tensor:
        """Rows of frames: image_emb, dense [N, HW, C], sparse [N, C] -> logits [N, H_i, W_i]."""
        if image_emb.shape != dense.shape or image_emb.ndim != 3 or sparse.shape != (image_emb.shape[0], image_emb.shape[2]):
            raise ShapeError(f"decoder inputs mismatch: image_emb {image_emb.dims}, dense {dense.dims}, sparse {sparse.dims}")
        n, _, c = image_emb.shape
        image = tn.add(image_emb, dense)
        mask_tok = tn.expand(tn.reshape(self.mask_token, (1, 1, c)), (n, 1, c))
        tokens = tn.concat([mask_tok, tn.reshape(sparse, (n, 1, c))], axis=1)
        for blk in self.blocks:
            tokens, image = blk(tokens, image)
        feats = self._upsample(image)  # N, c8, H4, W4
        _, c8, h4, w4 = feats.shape
        hyper = self.hyper(tn.take(tokens, 0, axis=1))  # N, c8
        logits = tn.matmul(tn.reshape(hyper, (n, 1, c8)), tn.reshape(feats, (n, c8, h4 * w4)))
        logits = tn.reshape(logits, (n, h4, w4))
        H, W = self._cfg.image_size
        return tn.bilinear_resize(logits, H, W)


def decode_frame(decoder: MaskDecoder, image_emb: Tensor, dense: Tensor, sparse: Tensor) -> Tensor:
    """Single frame: [HW, C], [HW, C], [C] -> [H_i, W_i]."""
    hw, c = image_emb.shape
    out = decoder(tn.reshape(image_emb, (1, hw, c)), tn.reshape(dense, (1, hw, c)), tn.reshape(sparse, (1, c)))
    return tn.reshape(out, out.shape[1:])


def decode_clip(decoder: MaskDecoder, image_emb: Tensor, dense: Tensor, sparse: Tensor) -> Tensor:
    """[..., T, HW, C] inputs -> logits [..., T, H_i, W_i]."""
    lead = image_emb.shape[:-2]
    hw, c = image_emb.shape[-2:]
    n = int(np.prod(lead))
    out = decoder(tn.reshape(image_emb, (n, hw, c)), tn.reshape(dense, (n, hw, c)), tn.reshape(sparse, (n, c)))
    return tn.reshape(out, (*lead, *out.shape[1:]))
