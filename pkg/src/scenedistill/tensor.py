"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array. Differentiable operations
are plain functions; while a :class:`Tape` is active (``with Tape() as t:``)
each executed op appends one entry (inputs, output, backward rule) to the
tape, and :func:`backward` replays the entries in reverse to accumulate
gradients into every ``requires_grad`` tensor reachable from the loss.

Conventions:
    * float32 is the training dtype; pass float64 data for gradient checks.
    * Any op that produces a NaN/Inf raises :class:`NumericsError` at once.
    * Tensors are treated as immutable after creation except for optimizer
      updates; the tape is single-threaded.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericsError,
)

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise NumericsError(f"{where} produced {bad} non-finite value(s)")


class Tensor:
    """N-dimensional dense real array, optionally participating in autodiff."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, "tensor creation")
        self.data: np.ndarray = arr
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Small arithmetic conveniences; the full op set lives at module level.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def parameter(data, dtype=None) -> Tensor:
    """Tensor that collects gradients (a trainable weight)."""
    return Tensor(data, requires_grad=True, dtype=dtype)


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of executed differentiable ops.

    Execution order is a topological order by construction, so one reverse
    sweep visits each recorded op exactly once with its output gradient
    fully accumulated.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ContractError("a Tape is already active; nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = None

    @staticmethod
    def active() -> Optional["Tape"]:
        return Tape._active

    def record(self, inputs, output, backward_fn, name: str) -> None:
        self.entries.append(_TapeEntry(tuple(inputs), output, backward_fn, name))

    def __len__(self) -> int:
        return len(self.entries)


def _make_output(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
    name: str,
) -> Tensor:
    """Wrap an op result, check finiteness, and record it if a tape is live."""
    _check_finite(data, name)
    tape = Tape.active()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs_grad
    out.grad = None
    if needs_grad:
        tape.record(inputs, out, backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make_output(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make_output(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make_output(data, (a, b), bwd, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a compile-time constant (not differentiated through)."""
    factor = float(factor)
    data = a.data * factor

    def bwd(g):
        return (g * factor if a.requires_grad else None,)

    return _make_output(data, (a,), bwd, "scale")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when leading dims match (or broadcast)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.data.ndim}-d and {b.data.ndim}-d"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from exc

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make_output(data, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ConfigError(f"kernel size {k} exceeds padded input extent {n + 2 * padding}")
    if span % stride != 0:
        raise ConfigError(
            f"conv2d output extent ({n} + 2*{padding} - {k}) / {stride} is not integral"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, C, kh, kw, out_h, out_w) over the padded input."""
    n, c, hp, wp = xp.shape
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    shape = (n, c, kh, kw, out_h, out_w)
    strides = (sn, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[
                :, :, i, j
            ]
    return xp[:, :, padding : hp - padding, padding : wp - padding]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with an FCkk kernel and F bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if b.shape != (f,):
        raise DimensionError(f"conv2d bias must have shape ({f},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d stride must be >=1 and padding >=0, got {stride}, {padding}")
    out_h = _conv_out_extent(h, kh, stride, padding)
    out_w = _conv_out_extent(wd, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride))
    k = c * kh * kw
    cols2 = cols.reshape(n, k, out_h * out_w)
    w2 = w.data.reshape(f, k)
    data = (np.matmul(w2, cols2) + b.data.reshape(1, f, 1)).reshape(n, f, out_h, out_w)

    def bwd(g):
        g2 = g.reshape(n, f, out_h * out_w)
        gx = gw = gb = None
        if b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if w.requires_grad:
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, kh, kw)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, out_h, out_w)
            gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gw, gb

    return _make_output(data, (x, w, b), bwd, "conv2d")


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        return gx, gg, gb

    return _make_output(data, (x, gamma, beta), bwd, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis; subtracts the row max first."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make_output(data, (x,), bwd, "softmax")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g * (x.data > 0),)

    return _make_output(data, (x,), bwd, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    data = np.where(x.data > 0, x.data, x.data * slope)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g * np.where(x.data > 0, 1.0, slope),)

    return _make_output(data, (x,), bwd, "leaky_relu")


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation (differentiable everywhere)."""
    x3 = x.data * x.data * x.data
    u = _GELU_C * (x.data + _GELU_A * x3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data * x.data)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make_output(data, (x,), bwd, "gelu")


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    """Dispatch on ``kind``: ``relu``, ``gelu`` or ``leaky_relu``."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ConfigError(f"unknown activation kind {kind!r}")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    keep *= 1.0 / (1.0 - p)
    data = x.data * keep

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g * keep,)

    return _make_output(data, (x,), bwd, "dropout")


# ---------------------------------------------------------------------------
# layout ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g.reshape(x.shape),)

    return _make_output(data, (x,), bwd, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make_output(data, (x,), bwd, "transpose")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (_unbroadcast(g, x.shape),)

    return _make_output(data, (x,), bwd, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                grads.append(np.ascontiguousarray(g[tuple(index)]))
            else:
                grads.append(None)
        return tuple(grads)

    return _make_output(data, tuple(tensors), bwd, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` elements starting at ``start`` along ``axis``."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    data = np.ascontiguousarray(x.data[tuple(index)])

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[tuple(index)] = g
        return (gx,)

    return _make_output(data, (x,), bwd, "narrow")


def unfold_patches(x: Tensor, p: int) -> Tensor:
    """Split NCHW into non-overlapping p x p patches.

    Output is (N, T, C*p*p) with T = (H/p)*(W/p); patches are ordered
    row-major over the patch grid, and within a patch the layout is
    channel-major then row-major. Exact inverse of :func:`fold_patches`.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"unfold_patches expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if p <= 0 or h % p or w % p:
        raise ConfigError(f"patch size {p} must divide image extents {h}x{w}")
    gh, gw = h // p, w // p
    data = np.ascontiguousarray(
        x.data.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    ).reshape(n, gh * gw, c * p * p)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.ascontiguousarray(
            g.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        ).reshape(n, c, h, w)
        return (gx,)

    return _make_output(data, (x,), bwd, "unfold_patches")


def fold_patches(t: Tensor, channels: int, h: int, w: int, p: int) -> Tensor:
    """Inverse of :func:`unfold_patches`."""
    if t.data.ndim != 3:
        raise DimensionError(f"fold_patches expects (N, T, C*p*p) input, got {t.shape}")
    n, tokens, flat = t.shape
    if h % p or w % p:
        raise ConfigError(f"patch size {p} must divide image extents {h}x{w}")
    gh, gw = h // p, w // p
    if tokens != gh * gw or flat != channels * p * p:
        raise DimensionError(
            f"fold_patches shape {t.shape} inconsistent with {channels}x{h}x{w}, p={p}"
        )
    data = np.ascontiguousarray(
        t.data.reshape(n, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    ).reshape(n, channels, h, w)

    def bwd(g):
        if not t.requires_grad:
            return (None,)
        gt = np.ascontiguousarray(
            g.reshape(n, channels, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        ).reshape(n, tokens, flat)
        return (gt,)

    return _make_output(data, (t,), bwd, "fold_patches")


def pixel_shuffle(x: Tensor, p: int) -> Tensor:
    """Rearrange (N, C*p^2, h, w) into (N, C, h*p, w*p)."""
    if x.data.ndim != 4:
        raise DimensionError(f"pixel_shuffle expects NCHW input, got {x.shape}")
    n, cpp, h, w = x.shape
    if p <= 0 or cpp % (p * p):
        raise ConfigError(f"pixel_shuffle needs channels divisible by p^2={p * p}, got {cpp}")
    if p == 1:
        return x
    c = cpp // (p * p)
    data = np.ascontiguousarray(
        x.data.reshape(n, c, p, p, h, w).transpose(0, 1, 4, 2, 5, 3)
    ).reshape(n, c, h * p, w * p)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.ascontiguousarray(
            g.reshape(n, c, h, p, w, p).transpose(0, 1, 3, 5, 2, 4)
        ).reshape(n, cpp, h, w)
        return (gx,)

    return _make_output(data, (x,), bwd, "pixel_shuffle")


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`: (N, C, h*p, w*p) -> (N, C*p^2, h, w)."""
    if x.data.ndim != 4:
        raise DimensionError(f"space_to_depth expects NCHW input, got {x.shape}")
    n, c, hp, wp = x.shape
    if p <= 0 or hp % p or wp % p:
        raise ConfigError(f"space_to_depth needs extents divisible by p={p}, got {hp}x{wp}")
    if p == 1:
        return x
    h, w = hp // p, wp // p
    data = np.ascontiguousarray(
        x.data.reshape(n, c, h, p, w, p).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, c * p * p, h, w)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.ascontiguousarray(
            g.reshape(n, c, p, p, h, w).transpose(0, 1, 4, 2, 5, 3)
        ).reshape(n, c, hp, wp)
        return (gx,)

    return _make_output(data, (x,), bwd, "space_to_depth")


# ---------------------------------------------------------------------------
# reductions and loss
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _make_output(data, (x,), bwd, "reduce_sum")


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _make_output(data, (x,), bwd, "reduce_mean")


def mse_loss_masked(pred: Tensor, label: Tensor, mask: Tensor) -> Tensor:
    """Mean squared error over valid pixels of a pointmap batch.

    ``pred`` and ``label`` are (N, 3, H, W); ``mask`` is (N, 1, H, W) with
    entries in {0, 1}. The sum of squared componentwise errors over valid
    pixels is divided by 3 * (number of valid pixels). Masked-out pixels
    contribute nothing regardless of their stored values.
    """
    if pred.shape != label.shape:
        raise DimensionError(f"pred/label shapes differ: {pred.shape} vs {label.shape}")
    if pred.data.ndim != 4 or pred.shape[1] != 3:
        raise DimensionError(f"expected (N, 3, H, W) predictions, got {pred.shape}")
    n, _, h, w = pred.shape
    if mask.shape != (n, 1, h, w):
        raise DimensionError(f"mask must be (N, 1, H, W) = {(n, 1, h, w)}, got {mask.shape}")
    mvals = mask.data
    if not np.all((mvals == 0) | (mvals == 1)):
        raise ContractError("mask entries must be 0 or 1")
    valid = float(mvals.sum())
    if valid == 0:
        raise DegenerateInputError("mse_loss_masked: mask has no valid pixels")
    denom = 3.0 * valid
    diff = (pred.data - label.data) * mvals
    data = np.asarray((diff * diff).sum() / denom, dtype=pred.data.dtype)

    def bwd(g):
        gp = gl = None
        common = (2.0 / denom) * g * diff
        if pred.requires_grad:
            gp = common
        if label.requires_grad:
            gl = -common
        return gp, gl, None

    return _make_output(data, (pred, label, mask), bwd, "mse_loss_masked")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    Walks the tape once in reverse. Repeated calls without zeroing grads
    accumulate, matching standard gradient-accumulation semantics.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue
        if entry.output.requires_grad:
            entry.output.accumulate_grad(g_out)
        input_grads = entry.backward_fn(g_out)
        for t, g in zip(entry.inputs, input_grads):
            if g is None:
                continue
            _check_finite(g, f"backward of {entry.name}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.requires_grad and key not in produced:
                leaves[key] = t
    # Whatever is left belongs to leaf tensors (never produced on the tape).
    for key, t in leaves.items():
        g = grads.get(key)
        if g is not None:
            t.accumulate_grad(g)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
