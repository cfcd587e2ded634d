"""Global-search reference matcher: dense 1/8 scores, dual softmax, MNN, threshold.

The score matrix is built once and processed in row blocks so that the
largest benchmark size (20736 tokens per view) fits in a few GB; the
dual-softmax confidences are never stored densely.
"""

from __future__ import annotations

import numpy as np

from ..cascade import DEFAULT_THETA, MatchSet, ScoreMatrix
from ..tensor import OpCounter, _count

BLOCK_ROWS = 1024


def global_oracle_match(
    feat_a: np.ndarray,
    feat_b: np.ndarray,
    theta: float = DEFAULT_THETA,
    counter: OpCounter | None = None,
    block_rows: int = BLOCK_ROWS,
) -> MatchSet:
    """MNN on ``P = softmax_row(S) * softmax_col(S)`` over all token pairs.

    Ties in either argmax go to the lowest index, as in the cascade.
    """
    s_mat = ScoreMatrix.from_features(feat_a, feat_b)
    fa, fb = s_mat.feat_a, s_mat.feat_b
    n_a, n_b = len(fa), len(fb)
    if n_a == 0 or n_b == 0:
        return MatchSet.empty()
    _count(counter, "mac", n_a * n_b * fa.shape[1])
    S = np.empty((n_a, n_b), dtype=np.float32)
    row_lse = np.empty(n_a, np.float64)
    col_max = np.full(n_b, -np.inf, np.float32)
    for r0 in range(0, n_a, block_rows):
        blk = S[r0 : r0 + block_rows]
        np.matmul(fa[r0 : r0 + block_rows], fb.T, out=blk)
        blk *= s_mat.scale
        m = blk.max(axis=1)
        row_lse[r0 : r0 + len(blk)] = m + np.log(np.exp(blk - m[:, None]).sum(axis=1, dtype=np.float64))
        np.maximum(col_max, blk.max(axis=0), out=col_max)
    col_sum = np.zeros(n_b, np.float64)
    for r0 in range(0, n_a, block_rows):
        col_sum += np.exp(S[r0 : r0 + block_rows] - col_max).sum(axis=0, dtype=np.float64)
    col_lse = col_max + np.log(col_sum)
    _count(counter, "exp", 2 * n_a * n_b)

    # confidences blockwise: row argmax per A token, running column argmax
    row_best = np.empty(n_a, np.int64)
    row_top = np.empty(n_a, np.float64)
    col_top = np.full(n_b, -np.inf)
    col_best = np.zeros(n_b, np.int64)
    for r0 in range(0, n_a, block_rows):
        blk = S[r0 : r0 + block_rows].astype(np.float64)
        P = np.exp(2 * blk - row_lse[r0 : r0 + len(blk), None] - col_lse[None, :])
        j = P.argmax(axis=1)
        row_best[r0 : r0 + len(blk)] = j
        row_top[r0 : r0 + len(blk)] = P[np.arange(len(blk)), j]
        i = P.argmax(axis=0)
        top = P[i, np.arange(n_b)]
        better = top > col_top  # strict: earlier blocks hold lower row indices
        col_top = np.where(better, top, col_top)
        col_best = np.where(better, i + r0, col_best)
    _count(counter, "exp", n_a * n_b)
    _count(counter, "cmp", 2 * n_a * n_b)
    i = np.arange(n_a)
    keep = (col_best[row_best] == i) & (row_top >= theta) & (row_top > 0)
    return MatchSet(i[keep], row_best[keep], row_top[keep].astype(np.float32)).sorted()
