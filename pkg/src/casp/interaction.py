"""Hybrid interaction at the 1/16 scale.

Each block runs, in order: self aggregated attention, cross aggregated
attention, cross context clustering against the other view's 1/32 tokens,
and a 1/16 <-> 1/32 fusion. Both views share weights and are updated from
the same pre-step state, so swapping the inputs swaps the outputs exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import coc_cluster, coc_dispatch, get_param, init_coc_weights
from .tensor import (
    DTYPE,
    ConvSpec,
    bilinear_upsample2,
    conv2d,
    gelu,
    linear,
    maxpool2,
    multihead_attention,
)

HEADS = 8


@dataclass
class InteractionState:
    f16a: np.ndarray
    f16b: np.ndarray
    f32a: np.ndarray
    f32b: np.ndarray

    def swapped(self) -> "InteractionState":
        return InteractionState(self.f16b, self.f16a, self.f32b, self.f32a)


def sinusoid_2d(h: int, w: int, c: int) -> np.ndarray:
    """2-D sine/cosine position code with four channel groups (sin x, cos x, sin y, cos y)."""
    if c % 4:
        raise ValueError("positional code needs a channel count divisible by 4")
    pe = np.zeros((h, w, c), dtype=np.float64)
    div = np.exp(np.arange(0, c // 2, 2) * (-np.log(10000.0) / (c // 2)))
    ys = np.arange(h, dtype=np.float64)[:, None, None] + 1
    xs = np.arange(w, dtype=np.float64)[None, :, None] + 1
    pe[:, :, 0::4] = np.sin(xs * div)
    pe[:, :, 1::4] = np.cos(xs * div)
    pe[:, :, 2::4] = np.sin(ys * div)
    pe[:, :, 3::4] = np.cos(ys * div)
    return pe.astype(DTYPE)


def _init_attention(prefix: str, c: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    std = 1.0 / np.sqrt(c)
    w = {f"{prefix}.{n}": rng.normal(0, std, (c, c)).astype(DTYPE) for n in ("q", "k", "v")}
    w[f"{prefix}.o"] = rng.normal(0, 0.5 * std, (c, c)).astype(DTYPE)
    w[f"{prefix}.ob"] = np.zeros(c, DTYPE)
    w[f"{prefix}.dw"] = rng.normal(0, 0.5, (c, 1, 2, 2)).astype(DTYPE)
    w[f"{prefix}.dwb"] = np.zeros(c, DTYPE)
    w[f"{prefix}.f1"] = rng.normal(0, std, (2 * c, c)).astype(DTYPE)
    w[f"{prefix}.f1b"] = np.zeros(2 * c, DTYPE)
    w[f"{prefix}.f2"] = rng.normal(0, 0.5 / np.sqrt(2 * c), (c, 2 * c)).astype(DTYPE)
    w[f"{prefix}.f2b"] = np.zeros(c, DTYPE)
    return w


def init_interaction_weights(n_blocks: int, c: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    weights = {}
    for b in range(n_blocks):
        p = f"inter.b{b}"
        weights.update(_init_attention(f"{p}.self", c, rng))
        weights.update(_init_attention(f"{p}.cross", c, rng))
        weights.update(init_coc_weights(f"{p}.coc", c, rng))
        for n in ("down", "up"):
            weights[f"{p}.fuse.{n}"] = rng.normal(0, 0.5 / np.sqrt(c), (c, c)).astype(DTYPE)
            weights[f"{p}.fuse.{n}b"] = np.zeros(c, DTYPE)
    return weights


def _pad_even(x: np.ndarray) -> np.ndarray:
    ph, pw = x.shape[0] % 2, x.shape[1] % 2
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return x


def aggregated_attention(
    x: np.ndarray,
    source: np.ndarray,
    weights: dict,
    prefix: str,
    heads: int = HEADS,
) -> np.ndarray:
    """Attention between 2x down-sampled queries and keys, then FFN.

    Queries go through a depthwise 2x2 stride-2 conv; keys and values
    through 2x2 max pooling. The message is upsampled back to the input
    resolution and added residually.
    """
    h, w, c = x.shape
    q = linear(_pad_even(x), get_param(weights, f"{prefix}.q", (c, c)))
    q = conv2d(q, ConvSpec(c, c, (2, 2), 2, 0, groups=c), weights[f"{prefix}.dw"], weights[f"{prefix}.dwb"])
    src = _pad_even(source)
    k = maxpool2(linear(src, weights[f"{prefix}.k"]))
    v = maxpool2(linear(src, weights[f"{prefix}.v"]))
    hq, wq = q.shape[:2]
    msg = multihead_attention(q.reshape(-1, c), k.reshape(-1, c), v.reshape(-1, c), heads)
    msg = linear(msg, weights[f"{prefix}.o"], weights[f"{prefix}.ob"]).reshape(hq, wq, c)
    x1 = x + bilinear_upsample2(msg)[:h, :w]
    hidden = gelu(linear(x1, weights[f"{prefix}.f1"], weights[f"{prefix}.f1b"]))
    return (x1 + linear(hidden, weights[f"{prefix}.f2"], weights[f"{prefix}.f2b"])).astype(DTYPE, copy=False)


def cross_coc(x: np.ndarray, anchors: np.ndarray, weights: dict, prefix: str) -> np.ndarray:
    """Cluster 1/16 tokens onto the other view's 1/32 tokens and dispatch their values."""
    h, w, c = x.shape
    pts = x.reshape(-1, c)
    anc = anchors.reshape(-1, c)
    ps = weights[f"{prefix}.ps"]
    s, assign = coc_cluster(linear(pts, ps), linear(anc, ps))
    p_hat = coc_dispatch(
        s,
        assign,
        linear(anc, weights[f"{prefix}.pv"]),
        float(weights[f"{prefix}.alpha"][0]),
        float(weights[f"{prefix}.beta"][0]),
    )
    out = pts + linear(p_hat, weights[f"{prefix}.o"], weights[f"{prefix}.ob"])
    return out.reshape(h, w, c).astype(DTYPE, copy=False)


def fuse_scales(x16: np.ndarray, x32: np.ndarray, weights: dict, prefix: str) -> tuple[np.ndarray, np.ndarray]:
    """Exchange local information between paired 1/16 and 1/32 maps (1x1 convs)."""
    h32, w32 = x32.shape[:2]
    if x16.shape[0] != 2 * h32 or x16.shape[1] != 2 * w32:
        raise ValueError(f"fuse_scales: {x16.shape[:2]} is not twice {x32.shape[:2]}")
    new32 = x32 + linear(maxpool2(x16), weights[f"{prefix}.down"], weights[f"{prefix}.downb"])
    new16 = x16 + linear(bilinear_upsample2(x32), weights[f"{prefix}.up"], weights[f"{prefix}.upb"])
    return new16.astype(DTYPE, copy=False), new32.astype(DTYPE, copy=False)


def hybrid_block(state: InteractionState, weights: dict, prefix: str, heads: int = HEADS) -> InteractionState:
    a = aggregated_attention(state.f16a, state.f16a, weights, f"{prefix}.self", heads)
    b = aggregated_attention(state.f16b, state.f16b, weights, f"{prefix}.self", heads)
    a, b = (
        aggregated_attention(a, b, weights, f"{prefix}.cross", heads),
        aggregated_attention(b, a, weights, f"{prefix}.cross", heads),
    )
    a, b = (
        cross_coc(a, state.f32b, weights, f"{prefix}.coc"),
        cross_coc(b, state.f32a, weights, f"{prefix}.coc"),
    )
    a16, a32 = fuse_scales(a, state.f32a, weights, f"{prefix}.fuse")
    b16, b32 = fuse_scales(b, state.f32b, weights, f"{prefix}.fuse")
    return InteractionState(a16, b16, a32, b32)


def run_hybrid(state: InteractionState, weights: dict, n_blocks: int = 2, heads: int = HEADS) -> InteractionState:
    """Add the position code to both 1/16 maps, then apply ``n_blocks`` hybrid blocks."""
    h, w, c = state.f16a.shape
    hb, wb, _ = state.f16b.shape
    state = replace(
        state,
        f16a=(state.f16a + sinusoid_2d(h, w, c)).astype(DTYPE),
        f16b=(state.f16b + sinusoid_2d(hb, wb, c)).astype(DTYPE),
    )
    for b in range(n_blocks):
        state = hybrid_block(state, weights, f"inter.b{b}", heads)
    return state
