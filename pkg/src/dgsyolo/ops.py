"""Deterministic NCHW kernels with their backward rules.

Every function takes and returns :class:`Tensor`. No op broadcasts
implicitly: operands of binary ops must have identical shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, add_macs, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.03
LN_EPS = 1e-5
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0 or self.groups < 1:
            raise ShapeError(f"invalid conv spec {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.kernel not in (1, 3):
            raise ShapeError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def param_count(self) -> int:
        k2 = self.kernel * self.kernel
        n = self.out_channels * (self.in_channels // self.groups) * k2
        return n + (self.out_channels if self.has_bias else 0)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        p, k, s = self.padding, self.kernel, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution with zero "same" padding of ``k // 2``."""
    _check4(x, "conv2d")
    n, c, h, wd = x.shape
    oc, cg, k, k2 = w.shape
    spec = ConvSpec(c, oc, k, stride, groups, b is not None)
    if spec.weight_shape != w.shape or k != k2:
        raise ShapeError(f"conv2d: weight shape {w.shape} does not match {spec.weight_shape}")
    if b is not None and b.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({oc},)")
    if groups == c == oc:
        return depthwise_conv(x, w, b, stride)

    p = spec.padding
    oh, ow = spec.out_hw(h, wd)
    g, ocg, kk = groups, oc // groups, cg * k * k
    L = oh * ow
    xd = x.data
    if k == 1 and stride == 1:
        cols = xd.reshape(n, g, kk, L)
        xp = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        cols = np.empty((n, g, cg, k, k, oh, ow), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                cols[:, :, :, i, j] = patch.reshape(n, g, cg, oh, ow)
        cols = cols.reshape(n, g, kk, L)
    wm = w.data.reshape(g, ocg, kk)
    out = np.matmul(wm, cols).reshape(n, oc, oh, ow)
    if b is not None:
        out += b.data.reshape(1, oc, 1, 1)
    add_macs(n * oc * L * kk)

    def backward(gout):
        go = gout.reshape(n, g, ocg, L)
        dw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wm.transpose(0, 2, 1), go)
        if xp is None:
            dx = dcols.reshape(x.shape)
        else:
            dcols = dcols.reshape(n, c, k, k, oh, ow)
            dxp = np.zeros(xp.shape, dtype=gout.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        db = gout.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out, inputs, backward, "conv2d")


def _depthwise_forward(x: np.ndarray, wv: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    """Tap-by-tap accumulation over flattened, zero-padded stride phases.

    Each channel is padded and split into ``stride**2`` phase grids; tap
    ``(i, j)`` then reads phase ``(i % stride, j % stride)`` as one contiguous
    1-D slice at a fixed offset. Columns past ``ow`` are scratch and dropped.
    """
    n, c, h, w = x.shape
    k, s = wv.shape[1], stride
    p = k // 2
    r = (k - 1) // s
    ph, pw = oh + r + 1, ow + r  # one slack row keeps every slice in range
    xp = np.zeros((n, c, s * ph, s * pw), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    if s == 1:
        phases = {(0, 0): xp.reshape(n, c, -1)}
    else:
        phases = {(a, b): np.ascontiguousarray(xp[:, :, a::s, b::s]).reshape(n, c, -1) for a in range(s) for b in range(s)}
    length = oh * pw
    acc = np.empty((n, c, length), dtype=x.dtype)
    tmp = np.empty_like(acc)
    for i in range(k):
        for j in range(k):
            off = (i // s) * pw + j // s
            src = phases[i % s, j % s][:, :, off : off + length]
            if i == j == 0:
                np.multiply(src, wv[:, 0, 0].reshape(1, c, 1), out=acc)
            else:
                np.multiply(src, wv[:, i, j].reshape(1, c, 1), out=tmp)
                acc += tmp
    return np.ascontiguousarray(acc.reshape(n, c, oh, pw)[:, :, :, :ow])


def depthwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Per-channel k x k convolution; the kernel ``conv2d`` uses when groups == channels."""
    _check4(x, "depthwise_conv")
    n, c, h, wd = x.shape
    if w.data.ndim != 4 or w.shape[0] != c or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise_conv: weight shape {w.shape} incompatible with {c} channels")
    k = w.shape[2]
    spec = ConvSpec(c, c, k, stride, c, b is not None)
    p = spec.padding
    oh, ow = spec.out_hw(h, wd)
    wv = w.data.reshape(c, k, k)
    out = _depthwise_forward(x.data, wv, stride, oh, ow)
    if b is not None:
        out += b.data.reshape(1, c, 1, 1)
    add_macs(n * c * oh * ow * k * k)

    def backward(gout):
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        dxp = np.zeros(xp.shape, dtype=gout.dtype)
        dw = np.empty((c, k, k), dtype=gout.dtype)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * oh, stride), slice(j, j + stride * ow, stride))
                dw[:, i, j] = (gout * xp[sl]).sum(axis=(0, 2, 3))
                dxp[sl] += gout * wv[:, i, j].reshape(1, c, 1, 1)
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        dw = dw.reshape(w.shape)
        if b is not None:
            return dx, dw, gout.sum(axis=(0, 2, 3))
        return dx, dw

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out, inputs, backward, "depthwise_conv")


# ---------------------------------------------------------------------------
# channel permutations and slicing


def shuffle_permutation(c: int, groups: int) -> np.ndarray:
    """Input channel index feeding each output channel of ``channel_shuffle``."""
    if groups < 1 or c % groups:
        raise ShapeError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    j = np.arange(c)
    return (j % groups) * (c // groups) + j // groups


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    _check4(x, "channel_shuffle")
    perm = shuffle_permutation(x.shape[1], groups)
    out = x.data[:, perm]

    def backward(gout):
        dx = np.empty_like(gout)
        dx[:, perm] = gout
        return (dx,)

    return record_op(out, (x,), backward, "channel_shuffle")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "channel_slice")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel_slice: [{start}, {stop}) outside {x.shape[1]} channels")
    out = x.data[:, start:stop]

    def backward(gout):
        dx = np.zeros(x.shape, dtype=gout.dtype)
        dx[:, start:stop] = gout
        return (dx,)

    return record_op(out, (x,), backward, "channel_slice")


def channel_split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    _check4(x, "channel_split")
    if sum(sizes) != x.shape[1] or any(s <= 0 for s in sizes):
        raise ShapeError(f"channel_split: sizes {list(sizes)} do not partition {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(channel_slice(x, start, start + s))
        start += s
    return out


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if not xs:
        raise ShapeError("concat: empty input")
    for t in xs:
        _check4(t, "concat")
        if (t.shape[0],) + t.shape[2:] != (xs[0].shape[0],) + xs[0].shape[2:]:
            raise ShapeError(f"concat: shape mismatch {t.shape} vs {xs[0].shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(gout):
        return tuple(gout[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record_op(out, tuple(xs), backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def backward(gout):
        return (gout.reshape(x.shape),)

    return record_op(out, (x,), backward, "reshape")


# ---------------------------------------------------------------------------
# elementwise


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")

    def backward(gout):
        return gout, gout

    return record_op(x.data + y.data, (x, y), backward, "add")


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "sub")

    def backward(gout):
        return gout, -gout

    return record_op(x.data - y.data, (x, y), backward, "sub")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mul")

    def backward(gout):
        return gout * y.data, gout * x.data

    return record_op(x.data * y.data, (x, y), backward, "mul")


def div(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x.data / y.data

    def backward(gout):
        gx = gout / y.data
        return gx, -gx * out

    return record_op(out, (x, y), backward, "div")


def scale(x: Tensor, s: float) -> Tensor:
    def backward(gout):
        return (gout * s,)

    return record_op(x.data * s, (x,), backward, "scale")


def add_scalar(x: Tensor, s: float) -> Tensor:
    def backward(gout):
        return (gout,)

    return record_op(x.data + s, (x,), backward, "add_scalar")


def square(x: Tensor) -> Tensor:
    def backward(gout):
        return (2 * gout * x.data,)

    return record_op(x.data * x.data, (x,), backward, "square")


def minimum(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "minimum")
    pick = x.data <= y.data

    def backward(gout):
        return np.where(pick, gout, 0), np.where(pick, 0, gout)

    return record_op(np.where(pick, x.data, y.data), (x, y), backward, "minimum")


def maximum(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "maximum")
    pick = x.data >= y.data

    def backward(gout):
        return np.where(pick, gout, 0), np.where(pick, 0, gout)

    return record_op(np.where(pick, x.data, y.data), (x, y), backward, "maximum")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data > lo

    def backward(gout):
        return (np.where(keep, gout, 0),)

    return record_op(np.where(keep, x.data, lo).astype(x.data.dtype), (x,), backward, "clamp_min")


def atan(x: Tensor) -> Tensor:
    def backward(gout):
        return (gout / (1 + x.data * x.data),)

    return record_op(np.arctan(x.data), (x,), backward, "atan")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input and gives sigmoid(0) == 0.5 exactly
    return 0.5 * (1 + np.tanh(0.5 * a))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(gout):
        return (gout * y * (1 - y),)

    return record_op(y, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(gout):
        return (gout * s * (1 + x.data * (1 - s)),)

    return record_op(x.data * s, (x,), backward, "silu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0 <= slope <= 1:
        raise ValueError(f"leaky_relu: slope {slope} outside [0, 1]")
    # for slope <= 1 the max picks x on the positive side and slope * x elsewhere
    out = np.maximum(x.data, x.data * x.data.dtype.type(slope))

    def backward(gout):
        return (np.where(x.data > 0, gout, gout * slope),)

    return record_op(out, (x,), backward, "leaky_relu")


def bce_with_logits(x: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against a constant target."""
    t = np.asarray(target, dtype=x.data.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: target shape {t.shape} != {x.shape}")
    a = x.data
    out = np.maximum(a, 0) - a * t + np.log1p(np.exp(-np.abs(a)))

    def backward(gout):
        return (gout * (_sigmoid(a) - t),)

    return record_op(out, (x,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# reductions and indexing


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(())

    def backward(gout):
        return (np.full(x.shape, gout.reshape(()), dtype=gout.dtype),)

    return record_op(out, (x,), backward, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean_all: empty tensor")
    return scale(sum_all(x), 1.0 / x.size)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x.reshape(-1)[index]``; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.int64)
    out = x.data.reshape(-1)[idx]

    def backward(gout):
        dx = np.zeros(x.size, dtype=gout.dtype)
        np.add.at(dx, idx.reshape(-1), gout.reshape(-1))
        return (dx.reshape(x.shape),)

    return record_op(out, (x,), backward, "take")


# ---------------------------------------------------------------------------
# normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = BN_EPS,
    training: bool = False,
) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
    """Batch normalization over (N, H, W).

    In inference mode uses the stored ``mean``/``var``. In training mode
    normalizes with batch statistics and also returns the batch mean and
    unbiased batch variance so the caller can update its running stats.
    """
    _check4(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or np.shape(mean) != (c,) or np.shape(var) != (c,):
        raise ShapeError(f"batchnorm: parameter shapes do not match {c} channels")
    xd = x.data
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu.reshape(1, c, 1, 1)
        v = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(v + eps)
        xhat = xc * inv.reshape(1, c, 1, 1)
        unbiased = v * (m / (m - 1)) if m > 1 else v
    else:
        inv = (1.0 / np.sqrt(np.asarray(var, dtype=xd.dtype) + eps)).astype(xd.dtype)
        xhat = (xd - np.asarray(mean, dtype=xd.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward(gout):
        dgamma = (gout * xhat).sum(axis=(0, 2, 3))
        dbeta = gout.sum(axis=(0, 2, 3))
        dxhat = gout * g4
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            ) * inv.reshape(1, c, 1, 1)
        else:
            dx = dxhat * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    y = record_op(out, (x, gamma, beta), backward, "batchnorm")
    if training:
        return y, mu, unbiased
    return y, None, None


def layernorm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize across channels independently at every (n, h, w) position."""
    _check4(x, "layernorm_channels")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm_channels: parameter shapes do not match {c} channels")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward(gout):
        dxhat = gout * g4
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * inv
        return dx, (gout * xhat).sum(axis=(0, 2, 3)), gout.sum(axis=(0, 2, 3))

    return record_op(out, (x, gamma, beta), backward, "layernorm_channels")


# ---------------------------------------------------------------------------
# pooling, resampling, attention primitives


def maxpool(x: Tensor, k: int, stride: int = 1) -> Tensor:
    """Max pooling with -inf padding of ``(k - 1) // 2`` on each side."""
    _check4(x, "maxpool")
    n, c, h, w = x.shape
    p = (k - 1) // 2
    oh, ow = (h + 2 * p - k) // stride + 1, (w + 2 * p - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"maxpool: window {k} larger than input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
    # separable: column max then row max
    colmax = xp[:, :, :, 0 : stride * ow : stride]
    for j in range(1, k):
        colmax = np.maximum(colmax, xp[:, :, :, j : j + stride * ow : stride])
    out = colmax[:, :, 0 : stride * oh : stride]
    for i in range(1, k):
        out = np.maximum(out, colmax[:, :, i : i + stride * oh : stride])
    out = np.ascontiguousarray(out)

    def backward(gout):
        # recover the first maximum in row-major window order; strict > keeps the earliest
        best = np.full((n, c, xp.shape[2], ow), -np.inf, dtype=xp.dtype)
        argj = np.zeros(best.shape, dtype=np.int64)
        for j in range(k):
            patch = xp[:, :, :, j : j + stride * ow : stride]
            better = patch > best
            best = np.where(better, patch, best)
            argj[better] = j
        top = np.full(out.shape, -np.inf, dtype=xp.dtype)
        argi = np.zeros(out.shape, dtype=np.int64)
        for i in range(k):
            patch = best[:, :, i : i + stride * oh : stride]
            better = patch > top
            top = np.where(better, patch, top)
            argi[better] = i
        rows = argi + stride * np.arange(oh).reshape(oh, 1)
        cols = np.take_along_axis(argj, rows, axis=2) + stride * np.arange(ow)
        flat = (rows * xp.shape[3] + cols).reshape(n * c, -1)
        flat = flat + (np.arange(n * c) * xp.shape[2] * xp.shape[3]).reshape(-1, 1)
        dxp = np.zeros(xp.size, dtype=gout.dtype)
        np.add.at(dxp, flat.ravel(), gout.ravel())
        dxp = dxp.reshape(xp.shape)
        return (dxp[:, :, p : p + h, p : p + w] if p else dxp,)

    return record_op(out, (x,), backward, "maxpool")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(gout):
        return (gout.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record_op(out, (x,), backward, "upsample_nearest")


def softmax_lastdim(x: Tensor) -> Tensor:
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(gout):
        return (y * (gout - (gout * y).sum(axis=-1, keepdims=True)),)

    # finite input (checked when it was produced) gives outputs in [0, 1]
    return record_op(y, (x,), backward, "softmax_lastdim", check_finite=False)


def matmul(a: Tensor, b: Tensor, trans_a: bool = False, trans_b: bool = False) -> Tensor:
    """Batched matrix product over the last two axes of rank-4 operands."""
    _check4(a, "matmul")
    _check4(b, "matmul")
    A = a.data.swapaxes(-1, -2) if trans_a else a.data
    B = b.data.swapaxes(-1, -2) if trans_b else b.data
    if A.shape[:2] != B.shape[:2] or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {A.shape} @ {B.shape}")
    out = np.matmul(A, B)
    add_macs(out.size * A.shape[-1])

    def backward(gout):
        dA = np.matmul(gout, B.swapaxes(-1, -2))
        dB = np.matmul(A.swapaxes(-1, -2), gout)
        return (
            dA.swapaxes(-1, -2) if trans_a else dA,
            dB.swapaxes(-1, -2) if trans_b else dB,
        )

    return record_op(out, (a, b), backward, "matmul")
