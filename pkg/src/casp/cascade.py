"""Cascaded matching: one-to-many priors at 1/16, region-restricted
cross-attention at 1/8, and one-to-one matching with partial softmax.

Inference never materializes a dense 1/8 score matrix: every 1/8 quantity
is computed on the support induced by the priors, i.e. ``k * r * r``
candidates per token.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .backbone import get_param
from .tensor import (
    DTYPE,
    ConvSpec,
    OpCounter,
    _count,
    conv2d,
    gelu,
    linear,
    multihead_attention,
    pad_to_multiple,
    row_softmax,
    topk_rows,
)

MIN_PRIORS = 4
DEFAULT_THETA = 0.2


class Mode(enum.Enum):
    INFERENCE = "inference"
    TRAIN_MATH = "train-math"


@dataclass(frozen=True)
class ScaleMap:
    """Index map between a coarse ``h16 x w16`` grid and its ``r``-times finer grid.

    Children of a coarse cell are listed in row-major order inside the cell,
    so position ``t`` of a child list is the slot ``(t // r, t % r)``.
    """

    h16: int
    w16: int
    r: int = 2

    @property
    def h8(self) -> int:
        return self.h16 * self.r

    @property
    def w8(self) -> int:
        return self.w16 * self.r

    @property
    def n16(self) -> int:
        return self.h16 * self.w16

    @property
    def n8(self) -> int:
        return self.h8 * self.w8

    def children(self, idx16) -> np.ndarray:
        idx16 = np.asarray(idx16)
        cy, cx = np.divmod(idx16, self.w16)
        t = np.arange(self.r * self.r)
        dy, dx = np.divmod(t, self.r)
        y = cy[..., None] * self.r + dy
        x = cx[..., None] * self.r + dx
        return y * self.w8 + x

    def parent(self, idx8) -> np.ndarray:
        y, x = np.divmod(np.asarray(idx8), self.w8)
        return (y // self.r) * self.w16 + x // self.r

    def slot(self, idx8) -> np.ndarray:
        y, x = np.divmod(np.asarray(idx8), self.w8)
        return (y % self.r) * self.r + x % self.r

    @classmethod
    def for_fine_grid(cls, h8: int, w8: int, r: int = 2) -> "ScaleMap":
        if h8 % r or w8 % r:
            raise ValueError(f"fine grid {h8}x{w8} not divisible by r={r}")
        return cls(h8 // r, w8 // r, r)


class ScoreMatrix:
    """Token correlation ``S[i, j] = <f_i, g_j> / (tau * sqrt(c))``.

    Backed either by features (scores computed on demand, nothing dense
    stored) or by an explicit dense matrix.
    """

    def __init__(self, feat_a=None, feat_b=None, dense=None, temperature: float = 1.0):
        if dense is None and (feat_a is None or feat_b is None):
            raise ValueError("need either a dense matrix or both feature sets")
        self.feat_a = None if feat_a is None else np.asarray(feat_a, DTYPE)
        self.feat_b = None if feat_b is None else np.asarray(feat_b, DTYPE)
        self.dense = None if dense is None else np.asarray(dense)
        self.temperature = temperature
        if self.dense is None:
            c = self.feat_a.shape[1]
            self.scale = DTYPE(1.0 / (temperature * np.sqrt(c)))

    @classmethod
    def from_features(cls, feat_a, feat_b, temperature: float = 1.0) -> "ScoreMatrix":
        fa = np.asarray(feat_a)
        fb = np.asarray(feat_b)
        return cls(fa.reshape(-1, fa.shape[-1]), fb.reshape(-1, fb.shape[-1]), temperature=temperature)

    @property
    def shape(self) -> tuple[int, int]:
        if self.dense is not None:
            return self.dense.shape
        return (len(self.feat_a), len(self.feat_b))

    @property
    def T(self) -> "ScoreMatrix":
        if self.dense is not None:
            return ScoreMatrix(dense=self.dense.T, temperature=self.temperature)
        return ScoreMatrix(self.feat_b, self.feat_a, temperature=self.temperature)

    def full(self, counter: OpCounter | None = None) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        _count(counter, "mac", self.feat_a.shape[0] * self.feat_b.shape[0] * self.feat_a.shape[1])
        return (self.feat_a @ self.feat_b.T) * self.scale

    def blocks(self, queries: np.ndarray, candidates: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
        """Scores of ``queries (n, q)`` against ``candidates (n, m)`` per batch row -> ``(n, q, m)``."""
        if self.dense is not None:
            return self.dense[queries[:, :, None], candidates[:, None, :]]
        n, q = queries.shape
        m = candidates.shape[1]
        _count(counter, "mac", n * q * m * self.feat_a.shape[1])
        fa = self.feat_a[queries]
        fb = self.feat_b[candidates]
        return np.matmul(fa, np.swapaxes(fb, 1, 2)) * self.scale


def _dense(s) -> np.ndarray:
    return s.full() if isinstance(s, ScoreMatrix) else np.asarray(s)


def select_priors(s16, k: int, counter: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` cross-view candidates for every 1/16 token in both views.

    Works on raw scores: any strictly increasing per-row transform (such as
    a softmax) selects the same candidates.
    """
    s = _dense(s16) if not isinstance(s16, ScoreMatrix) else s16.full(counter)
    n_a, n_b = s.shape
    if k > n_b or k > n_a:
        raise ValueError(f"k={k} exceeds the number of tokens ({n_a}, {n_b})")
    return topk_rows(s, k, counter), topk_rows(s.T, k, counter)


def dual_softmax(s, counter: OpCounter | None = None) -> np.ndarray:
    s = _dense(s)
    return row_softmax(s, counter) * row_softmax(s.T, counter).T


class DataError(ValueError):
    """Ground truth refers to tokens that do not exist."""


def _inject_side(conf: np.ndarray, gt: dict[int, list[int]], k: int) -> np.ndarray:
    pred = topk_rows(conf, k)
    out = pred.copy()
    for i, partners in gt.items():
        partners = np.unique(partners)
        if len(partners) > k:
            order = np.lexsort((partners, -conf[i, partners]))
            partners = partners[order[:k]]
        fill = [j for j in topk_rows(conf[i : i + 1], min(conf.shape[1], k + len(partners)))[0] if j not in set(partners)]
        chosen = np.concatenate([partners, np.asarray(fill[: k - len(partners)], dtype=partners.dtype)])
        order = np.lexsort((chosen, -conf[i, chosen]))
        out[i] = chosen[order]
    return out


def inject_ground_truth(p16: np.ndarray, gt_pairs, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Priors that contain every ground-truth partner, topped up with the best predictions.

    Each prior list is re-ordered by confidence (ties to the lowest index),
    so tokens whose partners already sit in the predicted top-``k`` keep
    their predicted list unchanged.
    """
    p16 = np.asarray(p16)
    gt = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    n_a, n_b = p16.shape
    if len(gt) and (gt.min() < 0 or gt[:, 0].max() >= n_a or gt[:, 1].max() >= n_b):
        raise DataError("ground-truth index out of range")
    fwd: dict[int, list[int]] = {}
    bwd: dict[int, list[int]] = {}
    for i, j in gt:
        fwd.setdefault(int(i), []).append(int(j))
        bwd.setdefault(int(j), []).append(int(i))
    return _inject_side(p16, fwd, k), _inject_side(p16.T, bwd, k)


# --- region-based selective cross-attention --------------------------------


def split_cells(x: np.ndarray, r: int) -> np.ndarray:
    """``(H, W, C) -> (H*W / r^2, r^2, C)``, cells in row-major order."""
    h, w, c = x.shape
    if h % r or w % r:
        raise ValueError(f"extent {h}x{w} not divisible by r={r}")
    return x.reshape(h // r, r, w // r, r, c).transpose(0, 2, 1, 3, 4).reshape(-1, r * r, c)


def merge_cells(cells: np.ndarray, h: int, w: int, r: int) -> np.ndarray:
    c = cells.shape[-1]
    return cells.reshape(h // r, w // r, r, r, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def init_rsca_weights(n_blocks: int, c: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    weights = {}
    std = 1.0 / np.sqrt(c)
    for b in range(n_blocks):
        p = f"rsca.b{b}"
        for n in ("q", "k", "v"):
            weights[f"{p}.{n}"] = rng.normal(0, std, (c, c)).astype(DTYPE)
        weights[f"{p}.o"] = rng.normal(0, std, (c, c)).astype(DTYPE)
        weights[f"{p}.ob"] = np.zeros(c, DTYPE)
        weights[f"{p}.f1"] = rng.normal(0, 1.0 / np.sqrt(2 * c), (2 * c, 2 * c)).astype(DTYPE)
        weights[f"{p}.f1b"] = np.zeros(2 * c, DTYPE)
        weights[f"{p}.conv"] = rng.normal(0, 0.5 / np.sqrt(18 * c), (c, 2 * c, 3, 3)).astype(DTYPE)
        weights[f"{p}.convb"] = np.zeros(c, DTYPE)
    return weights


def rsca_attention(
    fa: np.ndarray,
    fb: np.ndarray,
    prior_a: np.ndarray,
    weights: dict,
    prefix: str,
    r: int = 2,
    heads: int = 8,
) -> np.ndarray:
    """Messages for view A: each ``r x r`` cell attends to the cells of its B priors."""
    h, w, c = fa.shape
    q = split_cells(linear(fa, get_param(weights, f"{prefix}.q", (c, c))), r)
    kb = split_cells(linear(fb, weights[f"{prefix}.k"]), r)
    vb = split_cells(linear(fb, weights[f"{prefix}.v"]), r)
    n, k = prior_a.shape
    keys = kb[prior_a].reshape(n, k * r * r, c)
    vals = vb[prior_a].reshape(n, k * r * r, c)
    msg = multihead_attention(q, keys, vals, heads)
    msg = linear(msg, weights[f"{prefix}.o"], weights[f"{prefix}.ob"])
    return merge_cells(msg, h, w, r)


def _rsca_ffn(f: np.ndarray, m: np.ndarray, weights: dict, prefix: str) -> np.ndarray:
    c = f.shape[2]
    hidden = gelu(linear(np.concatenate([f, m], axis=2), weights[f"{prefix}.f1"], weights[f"{prefix}.f1b"]))
    return conv2d(hidden, ConvSpec(2 * c, c, (3, 3), 1, 1), weights[f"{prefix}.conv"], weights[f"{prefix}.convb"])


def rsca_block(
    fa: np.ndarray,
    fb: np.ndarray,
    prior_a: np.ndarray,
    prior_b: np.ndarray,
    weights: dict,
    prefix: str,
    r: int = 2,
    heads: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """One selective cross-attention round updating both views from the same inputs."""
    ha, wa = fa.shape[:2]
    hb, wb = fb.shape[:2]
    pa, pb = pad_to_multiple(fa, r), pad_to_multiple(fb, r)
    ma = rsca_attention(pa, pb, prior_a, weights, prefix, r, heads)
    mb = rsca_attention(pb, pa, prior_b, weights, prefix, r, heads)
    na = pa + _rsca_ffn(pa, ma, weights, prefix)
    nb = pb + _rsca_ffn(pb, mb, weights, prefix)
    return na[:ha, :wa].astype(DTYPE, copy=False), nb[:hb, :wb].astype(DTYPE, copy=False)


# --- one-to-one matching ---------------------------------------------------


def partial_softmax(x: np.ndarray, support) -> np.ndarray:
    """Softmax of ``x`` restricted to ``support``; exact zeros elsewhere."""
    x = np.asarray(x)
    support = np.unique(np.asarray(support, dtype=np.intp))
    if support.size == 0:
        raise ValueError("partial softmax needs a non-empty support")
    out = np.zeros_like(x)
    vals = x[support]
    e = np.exp(vals - vals.max())
    out[support] = e / e.sum()
    return out


@dataclass
class MatchSet:
    """One-to-one coarse matches between flattened 1/8 token grids."""

    ia: np.ndarray
    ib: np.ndarray
    conf: np.ndarray

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, DTYPE))

    def __len__(self) -> int:
        return len(self.ia)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.ia.tolist(), self.ib.tolist()))

    def sorted(self) -> "MatchSet":
        order = np.lexsort((self.ib, self.ia))
        return MatchSet(self.ia[order], self.ib[order], self.conf[order])

    def coords(self, grid_a: tuple[int, int], grid_b: tuple[int, int], stride: int = 8):
        """Token-center pixel coordinates ``(x, y)`` for both endpoints."""
        ya, xa = np.divmod(self.ia, grid_a[1])
        yb, xb = np.divmod(self.ib, grid_b[1])
        pa = np.stack([xa, ya], axis=1).astype(np.float64) * stride
        pb = np.stack([xb, yb], axis=1).astype(np.float64) * stride
        return pa, pb

    def to_dict(self, grid_a, grid_b, image_sizes, stride: int = 8, refined=None) -> dict:
        pa, pb = self.coords(grid_a, grid_b, stride)
        matches = []
        for n in range(len(self)):
            m = {"iA": pa[n].tolist(), "iB": pb[n].tolist(), "conf": float(self.conf[n])}
            if refined is not None:
                m["subpix_B"] = [float(v) for v in refined.positions[n]]
                m["H_patch"] = [float(v) for v in refined.homographies[n].ravel()]
            matches.append(m)
        return {
            "matches": matches,
            "scale": stride,
            "image_sizes": [list(map(int, s)) for s in image_sizes],
        }

    def to_json(self, *args, **kwargs) -> str:
        return json.dumps(self.to_dict(*args, **kwargs))


def _support_probs(s8: ScoreMatrix, prior: np.ndarray, phi_q: ScaleMap, phi_c: ScaleMap, counter):
    """Partial-softmax rows over prior-induced supports.

    Returns probabilities shaped ``(n16_q, r^2, k, r^2)``: query cell, query
    slot, prior rank, candidate slot.
    """
    n16, k = prior.shape
    rr = phi_q.r * phi_q.r
    queries = phi_q.children(np.arange(n16))
    candidates = phi_c.children(prior).reshape(n16, k * rr)
    scores = s8.blocks(queries, candidates, counter)
    _count(counter, "exp", scores.size)
    return row_softmax(scores).reshape(n16, rr, k, rr), candidates.reshape(n16, k, rr)


def _cross_lookup(pq, pc, prior_q, prior_c, rr):
    """Mutual confidence on the query-side support layout.

    ``P[cell, t, m, s] = pq[cell, t, m, s] * pc[prior_q[cell, m], s, pos, t]`` where
    ``pos`` is the rank of ``cell`` inside the candidate cell's priors, or 0
    when the pair violates prior membership.
    """
    n16, k = prior_q.shape
    back = prior_c[prior_q]  # (n16, k, k_c)
    hit = back == np.arange(n16)[:, None, None]
    member = hit.any(axis=2)
    pos = hit.argmax(axis=2)
    t = np.arange(rr)
    s = np.arange(rr)
    other = pc[
        prior_q[:, None, :, None],
        s[None, None, None, :],
        pos[:, None, :, None],
        t[None, :, None, None],
    ]
    prob = pq * other
    return np.where(member[:, None, :, None], prob, 0).astype(pq.dtype, copy=False)


def _best(prob: np.ndarray, cand: np.ndarray):
    """Per query token: highest confidence and its candidate (ties -> lowest index)."""
    n16, rr, k, _ = prob.shape
    flat = prob.reshape(n16, rr, -1)
    idx = np.broadcast_to(cand.reshape(n16, 1, -1), flat.shape)
    top = flat.max(axis=2, keepdims=True)
    big = np.iinfo(np.int64).max
    best = np.where(flat == top, idx, big).min(axis=2)
    return top[..., 0], best


def match_one_to_one(
    s8,
    prior_a: np.ndarray,
    prior_b: np.ndarray,
    phi_a: ScaleMap,
    phi_b: ScaleMap | None = None,
    theta: float = DEFAULT_THETA,
    counter: OpCounter | None = None,
) -> MatchSet:
    """Mutual-nearest matches on the prior support with partial-softmax confidence.

    A pair ``(i, j)`` can only be emitted when ``j`` is a child of one of
    ``i``'s parent priors and ``i`` is a child of one of ``j``'s parent
    priors; all other confidences are exactly zero.
    """
    phi_b = phi_a if phi_b is None else phi_b
    if not isinstance(s8, ScoreMatrix):
        s8 = ScoreMatrix(dense=s8)
    rr = phi_a.r * phi_a.r
    pa, cand_a = _support_probs(s8, prior_a, phi_a, phi_b, counter)
    pb, cand_b = _support_probs(s8.T, prior_b, phi_b, phi_a, counter)
    conf_a = _cross_lookup(pa, pb, prior_a, prior_b, rr)
    conf_b = _cross_lookup(pb, pa, prior_b, prior_a, rr)
    _count(counter, "cmp", conf_a.size + conf_b.size)

    top_a, best_a = _best(conf_a, cand_a)  # indexed by (cell, slot) of A
    top_b, best_b = _best(conf_b, cand_b)
    ia = phi_a.children(np.arange(phi_a.n16)).ravel()
    ib = phi_b.children(np.arange(phi_b.n16)).ravel()
    row_best = np.empty(phi_a.n8, np.int64)
    row_best[ia] = best_a.ravel()
    row_top = np.empty(phi_a.n8, conf_a.dtype)
    row_top[ia] = top_a.ravel()
    col_best = np.empty(phi_b.n8, np.int64)
    col_best[ib] = best_b.ravel()

    keep = (row_top > 0) & (row_top >= theta)
    cand_i = np.nonzero(keep)[0]
    cand_j = row_best[cand_i]
    mutual = col_best[cand_j] == cand_i
    i, j = cand_i[mutual], cand_j[mutual]
    return MatchSet(i.astype(np.int64), j.astype(np.int64), row_top[i]).sorted()


def partial_confidence_dense(s8, prior_a, prior_b, phi_a: ScaleMap, phi_b: ScaleMap | None = None) -> np.ndarray:
    """Dense ``P`` from the product of two partial softmaxes (training-side inspection)."""
    phi_b = phi_a if phi_b is None else phi_b
    s = _dense(s8)
    out = np.zeros(s.shape, dtype=s.dtype)
    rows = np.zeros(s.shape, dtype=s.dtype)
    cols = np.zeros(s.shape, dtype=s.dtype)
    for i in range(phi_a.n8):
        rows[i] = partial_softmax(s[i], phi_b.children(prior_a[phi_a.parent(i)]).ravel())
    for j in range(phi_b.n8):
        cols[:, j] = partial_softmax(s[:, j], phi_a.children(prior_b[phi_b.parent(j)]).ravel())
    out[:] = rows * cols
    return out


def mnn_dense(p: np.ndarray, theta: float) -> MatchSet:
    """Mutual nearest neighbours of a dense confidence matrix above ``theta``."""
    if p.size == 0:
        return MatchSet.empty()
    j_of_i = p.argmax(axis=1)
    i_of_j = p.argmax(axis=0)
    i = np.arange(p.shape[0])
    conf = p[i, j_of_i]
    keep = (i_of_j[j_of_i] == i) & (conf >= theta) & (conf > 0)
    return MatchSet(i[keep].astype(np.int64), j_of_i[keep].astype(np.int64), conf[keep]).sorted()


def cascade_match(
    f16a: np.ndarray,
    f16b: np.ndarray,
    f8a: np.ndarray,
    f8b: np.ndarray,
    k: int = 8,
    theta: float = DEFAULT_THETA,
    counter: OpCounter | None = None,
) -> tuple[MatchSet, tuple[np.ndarray, np.ndarray]]:
    """Priors from 1/16 maps, then one-to-one matching on 1/8 maps (no attention)."""
    phi_a = ScaleMap(f16a.shape[0], f16a.shape[1])
    phi_b = ScaleMap(f16b.shape[0], f16b.shape[1])
    s16 = ScoreMatrix.from_features(f16a, f16b)
    prior_a, prior_b = select_priors(s16, k, counter)
    s8 = ScoreMatrix.from_features(f8a, f8b)
    return match_one_to_one(s8, prior_a, prior_b, phi_a, phi_b, theta, counter), (prior_a, prior_b)
