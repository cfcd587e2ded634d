"""Accuracy summaries: cumulative-error AUC and match precision/recall."""

from __future__ import annotations

import numpy as np

POSE_THRESHOLDS = (5.0, 10.0, 20.0)  # degrees
HOMOGRAPHY_THRESHOLDS = (3.0, 5.0, 10.0)  # pixels


def compute_auc(errors, thresholds) -> list[float]:
    """Normalized area under the recall-vs-error curve up to each threshold.

    The curve is piecewise linear through ``(0, 0)`` and the sorted errors
    (trapezoid rule), held flat from the last error below the threshold to
    the threshold itself. Failures are passed as ``inf``.
    """
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(errors)
    if n == 0:
        return [0.0 for _ in thresholds]
    recall = np.arange(1, n + 1) / n
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = []
    for thr in thresholds:
        last = int(np.searchsorted(errors, thr, side="left"))
        e = np.concatenate([errors[:last], [thr]])
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        area = float(np.sum((e[1:] - e[:-1]) * (r[1:] + r[:-1]) / 2.0))
        out.append(area / thr)
    return out


def match_precision_recall(pairs: set, gt_pairs) -> tuple[float, float]:
    """Precision over emitted pairs and recall over ground-truth pairs (1.0 when a set is empty)."""
    gt = {(int(i), int(j)) for i, j in np.asarray(gt_pairs).reshape(-1, 2)}
    hits = len(pairs & gt)
    precision = hits / len(pairs) if pairs else 1.0
    recall = hits / len(gt) if gt else 1.0
    return precision, recall
