"""Parameter containers shared by the encoders, ST-BAVA and the decoder."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Anything owning named parameter tensors, possibly through children."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")


def uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, dtype, bound: float | None = None):
        self.w = uniform(rng, (n_in, n_out), bound if bound is not None else math.sqrt(1.0 / n_in), dtype)
        self.b = zeros((n_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, c: int, dtype):
        self.gamma = ones((c,), dtype)
        self.beta = zeros((c,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, rng, sizes: list[int], dtype):
        self.layers = [Linear(rng, a, b, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = tn.gelu(x)
        return x


class MhCrossAttnWeights(Module):
    """Query/key/value/output projections for multi-head cross-attention."""

    def __init__(self, rng, c: int, heads: int, dtype):
        if c % heads:
            raise ValueError(f"heads ({heads}) must divide channels ({c})")
        self._heads = heads
        bound = math.sqrt(1.0 / c)
        self.q = Linear(rng, c, c, dtype, bound)
        self.k = Linear(rng, c, c, dtype, bound)
        self.v = Linear(rng, c, c, dtype, bound)
        self.o = Linear(rng, c, c, dtype, bound)

    @property
    def heads(self) -> int:
        return self._heads


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, C] -> [..., heads, N, C/heads]."""
    *lead, n, c = x.shape
    x = tn.reshape(x, (*lead, n, heads, c // heads))
    k = len(lead)
    return tn.permute(x, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, d] -> [..., N, heads*d]."""
    *lead, h, n, d = x.shape
    k = len(lead)
    x = tn.permute(x, (*range(k), k + 1, k, k + 2))
    return tn.reshape(x, (*lead, n, h * d))


def attend(w: MhCrossAttnWeights, q_in: Tensor, kv_in: Tensor, c: int) -> Tensor:
    """Plain multi-head attention of ``q_in`` [..., Nq, C] over ``kv_in`` [..., Nk, C]."""
    q = split_heads(w.q(q_in), w.heads)
    k = split_heads(w.k(kv_in), w.heads)
    v = split_heads(w.v(kv_in), w.heads)
    a = tn.softmax_axis(tn.matmul(q, tn.swapaxes(k, -1, -2)), axis=-1, scale=1.0 / math.sqrt(c))
    return w.o(merge_heads(tn.matmul(a, v)))
