"""Small dense tensor type with a recording tape for reverse-mode gradients.

Only the operations the segmentation pipeline needs are provided. Every op
works on numpy arrays underneath and registers a backward closure on the
active :class:`Tape` when one of its inputs requires a gradient.
"""
from __future__ import annotations

import functools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded and :meth:`backward` replays them in exact reverse order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.data.shape:
                    ig = _unbroadcast(ig, inp.data.shape)
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += ig
        self.nodes.clear()


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def set_check_finite(flag: bool) -> None:
    _local.no_check = not flag


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not getattr(_local, "no_check", False) and not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    return _finish(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _finish(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_K = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, unlike relu."""
    d = x.data
    d2 = d * d
    th = np.tanh(_GELU_K * d * (1.0 + 0.044715 * d2))
    out = 0.5 * d * (1.0 + th)

    def back(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * dinner),)

    return _finish(out, (x,), back, "gelu")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dt(x):
    return x.data.dtype if isinstance(x, Tensor) else None


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.data.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _finish(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (repeat along singleton or new leading axes)."""
    src = x.data.shape
    out = np.broadcast_to(x.data, tuple(shape))
    return _finish(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, src),), "expand")


def mean(x: Tensor, axis: int | tuple[int, ...], keepdims: bool = False) -> Tensor:
    src = x.data.shape
    ax = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([src[i] for i in ax]))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, tuple(a % len(src) for a in ax))
        return (np.broadcast_to(g / n, src),)

    return _finish(x.data.mean(axis=ax, keepdims=keepdims), (x,), back, "mean")


def total(x: Tensor) -> Tensor:
    src = x.data.shape
    return _finish(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src),), "sum")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    sizes = [t.data.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _finish(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def take(x: Tensor, index: int, axis: int) -> Tensor:
    src = x.data.shape

    def back(g):
        full = np.zeros(src, dtype=g.dtype)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _finish(np.take(x.data, index, axis=axis), (x,), back, "take")


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, leading axes broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {list(ad.shape)} @ {list(bd.shape)}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {list(ad.shape)} @ {list(bd.shape)}") from exc

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _finish(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- nonlinear


def softmax_axis(x: Tensor, axis: int = -1, scale: float = 1.0) -> Tensor:
    """Max-subtracted softmax of ``scale * x`` along ``axis``."""
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    z = x.data * scale
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (scale * y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.data
    c = d.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm affine dims {gamma.dims}/{beta.dims} do not match last dim {c}")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggam = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbet = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggam, gbet

    return _finish(out, (x, gamma, beta), back, "layer_norm")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed in log-sigmoid form."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.data.shape:
        raise ShapeError(f"bce shapes differ: logits {list(logits.data.shape)} vs targets {list(t.shape)}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("bce targets must be binary (0 or 1)")
    x = logits.data
    t = t.astype(x.dtype)
    n = x.size
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()

    def back(g):
        return ((sigmoid_np(x) - t) * (g / n),)

    return _finish(np.asarray(loss, dtype=x.dtype), (logits,), back, "bce_with_logits")


# ------------------------------------------------------------ interpolation


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix for align-corners-false linear resampling."""
    return _interp_matrix(int(n_in), int(n_out), np.dtype(dtype)).copy()


@functools.lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype: np.dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize over the last two axes (align_corners=False)."""
    h, w = x.data.shape[-2:]
    ry = _interp_matrix(h, out_h, x.data.dtype)
    rx = _interp_matrix(w, out_w, x.data.dtype)
    out = ry @ x.data @ rx.T

    def back(g):
        return (ry.T @ g @ rx,)

    return _finish(out, (x,), back, "bilinear_resize")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    h, w = x.data.shape[-2:]
    return bilinear_resize(x, h * factor, w * factor)


# ------------------------------------------------------------------- oracle


def finite_diff_grad(
    f: Callable[[], float],
    params: Iterable[Tensor],
    h: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Central-difference gradient estimates of scalar ``f`` wrt ``params``.

    ``f`` closes over the parameter tensors and is re-evaluated after each
    in-place perturbation. With ``samples`` set, only that many flat
    coordinates per tensor are probed. Returns ``(flat_indices, estimates)``
    per parameter.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
        est = np.empty(len(idx), dtype=np.float64)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                label = p.name or f"param[{k}]"
                raise NonFiniteError(f"finite-difference oracle failed: non-finite objective when probing {label}")
            est[j] = (fp - fm) / (2 * h)
        out.append((idx, est))
    return out


def rel_err(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
