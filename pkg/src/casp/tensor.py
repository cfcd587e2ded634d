"""Dense float32 kernels shared by every stage of the matcher.

All feature maps are ``(H, W, C)`` row-major ``numpy`` arrays of dtype
``float32``. Token grids are flattened row-major, so token ``y * W + x``
sits at grid cell ``(y, x)``. Kernels never mutate their inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are inconsistent."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


class OpCounter:
    """Tally of arithmetic work by category.

    Units are multiply-accumulates for products (``"mac"``) and element
    visits for everything else (``"exp"``, ``"cmp"``, ...).
    """

    def __init__(self):
        self.counts: Counter[str] = Counter()

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counts.items()))


def _count(counter: OpCounter | None, kind: str, n: int) -> None:
    if counter is not None:
        counter.add(kind, n)


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    _count(counter, "mac", a.shape[0] * a.shape[1] * b.shape[1])
    return np.matmul(as_tensor(a), as_tensor(b))


def row_softmax(x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    x = np.asarray(x)
    _count(counter, "exp", x.size)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def topk_rows(x: np.ndarray, k: int, counter: OpCounter | None = None) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, best first.

    Ties resolve to the lowest column index, both when deciding membership
    and when ordering. Runs in linear time per row (partition, not sort).
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"topk_rows expects a matrix, got shape {x.shape}")
    m, n = x.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    _count(counter, "cmp", m * n)
    if k == n:
        return np.argsort(-x, axis=1, kind="stable")
    kth = np.partition(x, n - k, axis=1)[:, n - k : n - k + 1]
    above = x > kth
    need = k - above.sum(axis=1, keepdims=True)
    tied = x == kth
    keep = above | (tied & (np.cumsum(tied, axis=1) <= need))
    cols = np.nonzero(keep)[1].reshape(m, k)
    vals = np.take_along_axis(x, cols, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Apply ``x @ w.T + b`` over the channel axis of any-rank ``x``."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    y = np.matmul(x.reshape(-1, x.shape[-1]), w.T).reshape(*x.shape[:-1], w.shape[0])
    if b is not None:
        y = y + b
    return y


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)


def conv2d(
    x: np.ndarray,
    spec: ConvSpec,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Zero-padded 2-D cross-correlation on an ``(H, W, Cin)`` map.

    ``weight`` has shape ``(Cout, Cin // groups, kh, kw)``.
    """
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise DimensionError(f"conv2d: input {x.shape} does not match {spec}")
    if weight.shape != spec.weight_shape:
        raise DimensionError(f"conv2d: weight {weight.shape} != {spec.weight_shape}")
    kh, kw = spec.kernel
    p, s, g = spec.padding, spec.stride, spec.groups
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise DimensionError(f"conv2d: padded input {xp.shape[:2]} smaller than kernel")
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::s, ::s]  # (Ho, Wo, Cin, kh, kw)
    ho, wo = win.shape[:2]
    cin_g, cout_g = spec.in_channels // g, spec.out_channels // g

    if g == 1:
        cols = win.reshape(ho * wo, spec.in_channels * kh * kw)
        out = np.matmul(cols, weight.reshape(spec.out_channels, -1).T)
        out = out.reshape(ho, wo, spec.out_channels)
    elif cin_g == 1:
        # depthwise (optionally with a channel multiplier)
        mult = cout_g
        w = weight.reshape(spec.in_channels, mult, kh, kw)
        out = np.einsum("hwcij,cmij->hwcm", win, w, optimize=True)
        out = out.reshape(ho, wo, spec.out_channels)
    else:
        parts = []
        for gi in range(g):
            cols = win[:, :, gi * cin_g : (gi + 1) * cin_g].reshape(ho * wo, cin_g * kh * kw)
            wg = weight[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
            parts.append(np.matmul(cols, wg.T).reshape(ho, wo, cout_g))
        out = np.concatenate(parts, axis=2)
    if bias is not None:
        out = out + bias
    return out.astype(DTYPE, copy=False)


def _check_even(x: np.ndarray, op: str) -> None:
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise DimensionError(f"{op}: spatial extent {x.shape[:2]} is not even")


def maxpool2(x: np.ndarray) -> np.ndarray:
    _check_even(x, "maxpool2")
    h, w = x.shape[0] // 2, x.shape[1] // 2
    return x.reshape(h, 2, w, 2, *x.shape[2:]).max(axis=(1, 3))


def avgpool2(x: np.ndarray) -> np.ndarray:
    _check_even(x, "avgpool2")
    h, w = x.shape[0] // 2, x.shape[1] // 2
    return x.reshape(h, 2, w, 2, *x.shape[2:]).mean(axis=(1, 3), dtype=DTYPE)


def pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    """Zero-pad the bottom/right of a map so both extents divide ``m``."""
    ph = -x.shape[0] % m
    pw = -x.shape[1] % m
    if not ph and not pw:
        return x
    pads = [(0, ph), (0, pw)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pads)


def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    src = (np.arange(out, dtype=np.float64) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(DTYPE)
    shape = [1] * x.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with the half-pixel (align-corners=false) convention."""
    y = _resize_axis(x, out_h, 0)
    return _resize_axis(y, out_w, 1).astype(DTYPE, copy=False)


def bilinear_upsample2(x: np.ndarray) -> np.ndarray:
    return bilinear_resize(x, 2 * x.shape[0], 2 * x.shape[1])


def bilinear_sample(x: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``x`` at fractional grid positions; zero outside the map.

    Positions are in index units of ``x`` (cell centers at integers).
    Returns an array of shape ``ys.shape + x.shape[2:]``.
    """
    if x.ndim == 2:
        return bilinear_sample(x[..., None], ys, xs)[..., 0]
    h, w = x.shape[:2]
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + x.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = x[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(ok[..., None], vals, 0.0) * (wy * wx)
    return out.astype(DTYPE)


def multihead_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention over the last two axes.

    ``q`` is ``(..., nq, c)`` and ``k``/``v`` are ``(..., nk, c)``; leading
    axes are batch axes. Scores are scaled by ``1/sqrt(c // heads)``.
    """
    *batch, nq, c = q.shape
    nk = k.shape[-2]
    if c % heads:
        raise DimensionError(f"{heads} heads do not divide width {c}")
    d = c // heads

    def split(t, n):
        return np.swapaxes(t.reshape(*batch, n, heads, d), -2, -3)

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    a = row_softmax(np.matmul(qh, np.swapaxes(kh, -1, -2)) * DTYPE(1.0 / np.sqrt(d)))
    out = np.swapaxes(np.matmul(a, vh), -2, -3).reshape(*batch, nq, c)
    if return_weights:
        return out, a
    return out
