"""Feature pyramid extraction.

Low-level maps (1/2, 1/4, 1/8) come from a RepVGG-style CNN; high-level
maps (1/16, 1/32) come from patch merging followed by a self context-cluster
block.

Parameter names follow ``stage.block.branch.kind``, e.g.
``low.s2.b0.dense.w`` or ``high.s16.coc.pv``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ConvSpec, avgpool2, conv2d, linear, pad_to_multiple, relu, sigmoid

HIGH_CHANNELS = 256


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "full"
    low_channels: tuple[int, int, int] = (64, 128, 192)
    low_blocks: tuple[int, int, int] = (2, 4, 4)
    high_channels: int = HIGH_CHANNELS
    anchor_cell: int = 2

    @classmethod
    def for_variant(cls, variant: str) -> "BackboneConfig":
        if variant == "full":
            return cls("full", (64, 128, 192), (2, 4, 4))
        if variant == "lite":
            return cls("lite", (64, 64, 128), (2, 4, 4))
        raise ValueError(f"unknown backbone variant {variant!r}")


class WeightError(KeyError):
    """A parameter is missing or has the wrong shape."""


def get_param(weights: dict, name: str, shape: tuple | None = None) -> np.ndarray:
    try:
        w = weights[name]
    except KeyError:
        raise WeightError(f"missing parameter {name!r}") from None
    if shape is not None and tuple(w.shape) != tuple(shape):
        raise WeightError(f"parameter {name!r} has shape {w.shape}, expected {shape}")
    return w


# --- RepVGG blocks ---------------------------------------------------------


def _low_block_layout(cfg: BackboneConfig):
    """Yield ``(prefix, cin, cout, stride)`` for every low-level block."""
    cin = 1
    for s, (cout, nb) in enumerate(zip(cfg.low_channels, cfg.low_blocks), start=1):
        for b in range(nb):
            stride = 2 if b == 0 else 1
            yield f"low.s{s}.b{b}", cin, cout, stride
            cin = cout


def init_low_weights(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    weights = {}
    for prefix, cin, cout, _ in _low_block_layout(cfg):
        # half-He per branch: two summed branches keep activations O(1)
        std3 = np.sqrt(1.0 / (cin * 9))
        std1 = np.sqrt(1.0 / cin)
        weights[f"{prefix}.dense.w"] = rng.normal(0, std3, (cout, cin, 3, 3)).astype(DTYPE)
        weights[f"{prefix}.dense.b"] = np.zeros(cout, DTYPE)
        weights[f"{prefix}.pw.w"] = rng.normal(0, std1, (cout, cin, 1, 1)).astype(DTYPE)
        weights[f"{prefix}.pw.b"] = np.zeros(cout, DTYPE)
    return weights


def repvgg_block(x: np.ndarray, weights: dict, prefix: str, cin: int, cout: int, stride: int) -> np.ndarray:
    """Training-form block: ReLU(3x3 + 1x1 + identity)."""
    dense = get_param(weights, f"{prefix}.dense.w", (cout, cin, 3, 3))
    pw = get_param(weights, f"{prefix}.pw.w", (cout, cin, 1, 1))
    y = conv2d(x, ConvSpec(cin, cout, (3, 3), stride, 1), dense, weights[f"{prefix}.dense.b"])
    y = y + conv2d(x, ConvSpec(cin, cout, (1, 1), stride, 0), pw, weights[f"{prefix}.pw.b"])
    if stride == 1 and cin == cout:
        y = y + x
    return relu(y)


def fold_repvgg(weights: dict, prefix: str, cin: int, cout: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapse the three branches into one equivalent 3x3 kernel and bias."""
    kernel = weights[f"{prefix}.dense.w"].astype(np.float64).copy()
    kernel[:, :, 1, 1] += weights[f"{prefix}.pw.w"][:, :, 0, 0]
    if stride == 1 and cin == cout:
        kernel[np.arange(cout), np.arange(cin), 1, 1] += 1.0
    bias = weights[f"{prefix}.dense.b"].astype(np.float64) + weights[f"{prefix}.pw.b"]
    return kernel.astype(DTYPE), bias.astype(DTYPE)


def folded_block(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    cout, cin = kernel.shape[:2]
    return relu(conv2d(x, ConvSpec(cin, cout, (3, 3), stride, 1), kernel, bias))


def extract_low(image: np.ndarray, cfg: BackboneConfig, weights: dict) -> list[np.ndarray]:
    """Return the 1/2, 1/4 and 1/8 maps of an ``(H, W)`` or ``(H, W, 1)`` image."""
    x = np.asarray(image, dtype=DTYPE)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape[0] % 32 or x.shape[1] % 32:
        raise ValueError(f"image extent {x.shape[:2]} must be divisible by 32 (pad first)")
    maps = []
    stage = None
    for prefix, cin, cout, stride in _low_block_layout(cfg):
        s = prefix.split(".")[1]
        if stage is not None and s != stage:
            maps.append(x)
        stage = s
        x = repvgg_block(x, weights, prefix, cin, cout, stride)
    maps.append(x)
    return maps


def count_low_params(cfg: BackboneConfig) -> int:
    return sum(cout * cin * 10 + 2 * cout for _, cin, cout, _ in _low_block_layout(cfg))


# --- context clusters ------------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def coc_cluster(points: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of points to anchors and the hard assignment.

    Zero-norm vectors get similarity 0 to everything. ``argmax`` returns the
    first maximum, so ties go to the lowest anchor index.
    """
    s = _unit_rows(points) @ _unit_rows(anchors).T
    return s, np.argmax(s, axis=1)


def coc_aggregate(s: np.ndarray, assignment: np.ndarray, anchor_v: np.ndarray, point_v: np.ndarray) -> np.ndarray:
    """Update anchor values with the similarity-weighted mean of their cluster.

    The anchor contributes with unit weight, so an empty cluster keeps its
    anchor value unchanged.
    """
    n, m = s.shape
    w = np.zeros((n, m), dtype=s.dtype)
    rows = np.arange(n)
    w[rows, assignment] = s[rows, assignment]
    num = anchor_v + w.T @ point_v
    den = 1.0 + w.sum(axis=0)
    return (num / den[:, None]).astype(anchor_v.dtype, copy=False)


def coc_dispatch(
    s: np.ndarray,
    assignment: np.ndarray,
    anchor_v: np.ndarray,
    scale: float = 1.0,
    shift: float = 0.0,
) -> np.ndarray:
    gate = sigmoid(scale * s[np.arange(len(assignment)), assignment] + shift)
    return (gate[:, None] * anchor_v[assignment]).astype(anchor_v.dtype, copy=False)


def anchor_centers(x: np.ndarray, cell: int = 2) -> np.ndarray:
    """Average-pool ``cell x cell`` blocks (ceil mode) into anchor tokens."""
    if cell != 2:
        raise ValueError("only 2x2 anchor cells are supported")
    h, w = x.shape[:2]
    ones = np.ones((h, w, 1), DTYPE)
    num = avgpool2(pad_to_multiple(x, 2))
    den = avgpool2(pad_to_multiple(ones, 2))
    return num / den


def init_coc_weights(prefix: str, c: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    std = 1.0 / np.sqrt(c)
    return {
        f"{prefix}.ps": rng.normal(0, std, (c, c)).astype(DTYPE),
        f"{prefix}.pv": rng.normal(0, std, (c, c)).astype(DTYPE),
        f"{prefix}.o": rng.normal(0, 0.5 * std, (c, c)).astype(DTYPE),
        f"{prefix}.ob": np.zeros(c, DTYPE),
        f"{prefix}.alpha": np.ones(1, DTYPE),
        f"{prefix}.beta": np.zeros(1, DTYPE),
    }


def self_coc(x: np.ndarray, weights: dict, prefix: str, cell: int = 2) -> np.ndarray:
    """One clustering/aggregating/dispatching round with residual output."""
    h, w, c = x.shape
    pts = x.reshape(h * w, c)
    anc = anchor_centers(x, cell).reshape(-1, c)
    ps, pv = weights[f"{prefix}.ps"], weights[f"{prefix}.pv"]
    s, assign = coc_cluster(linear(pts, ps), linear(anc, ps))
    # aggregation weights clamped at zero so every denominator stays >= 1
    a_hat = coc_aggregate(np.maximum(s, 0), assign, linear(anc, pv), linear(pts, pv))
    p_hat = coc_dispatch(s, assign, a_hat, float(weights[f"{prefix}.alpha"][0]), float(weights[f"{prefix}.beta"][0]))
    out = pts + linear(p_hat, weights[f"{prefix}.o"], weights[f"{prefix}.ob"])
    return out.reshape(h, w, c).astype(DTYPE, copy=False)


def init_high_weights(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    weights = {}
    cin = cfg.low_channels[2]
    c = cfg.high_channels
    for tag in ("s16", "s32"):
        weights[f"high.{tag}.merge.w"] = rng.normal(0, 1.0 / np.sqrt(4 * cin), (c, cin, 2, 2)).astype(DTYPE)
        weights[f"high.{tag}.merge.b"] = np.zeros(c, DTYPE)
        weights.update(init_coc_weights(f"high.{tag}.coc", c, rng))
        cin = c
    return weights


def extract_high(map8: np.ndarray, cfg: BackboneConfig, weights: dict) -> tuple[np.ndarray, np.ndarray]:
    """Return the 1/16 and 1/32 maps built on top of the 1/8 map."""
    x = map8
    outs = []
    for tag in ("s16", "s32"):
        cin = x.shape[2]
        wm = get_param(weights, f"high.{tag}.merge.w", (cfg.high_channels, cin, 2, 2))
        x = conv2d(x, ConvSpec(cin, cfg.high_channels, (2, 2), 2, 0), wm, weights[f"high.{tag}.merge.b"])
        x = self_coc(x, weights, f"high.{tag}.coc", cfg.anchor_cell)
        outs.append(x)
    return outs[0], outs[1]


@dataclass
class FeaturePyramid:
    """Maps keyed by scale denominator (2, 4, 8, 16, 32)."""

    maps: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, denom: int) -> np.ndarray:
        return self.maps[denom]


def extract_pyramid(image: np.ndarray, cfg: BackboneConfig, weights: dict) -> FeaturePyramid:
    m2, m4, m8 = extract_low(image, cfg, weights)
    m16, m32 = extract_high(m8, cfg, weights)
    return FeaturePyramid({2: m2, 4: m4, 8: m8, 16: m16, 32: m32})
