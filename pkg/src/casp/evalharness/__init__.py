"""Synthetic scenes, the global-search reference matcher, metrics and benchmarks."""

from .bench import BenchRow, bench_matching, bench_size, op_ratio_ok
from .metrics import HOMOGRAPHY_THRESHOLDS, POSE_THRESHOLDS, compute_auc, match_precision_recall
from .oracle import global_oracle_match
from .report import EvalReport, EvalSpec, evaluate
from .scenes import FAMILIES, SceneSpec, SyntheticScene, generate_scene, render_images

__all__ = [
    "BenchRow", "bench_matching", "bench_size", "op_ratio_ok",
    "HOMOGRAPHY_THRESHOLDS", "POSE_THRESHOLDS", "compute_auc", "match_precision_recall",
    "global_oracle_match", "EvalReport", "EvalSpec", "evaluate",
    "FAMILIES", "SceneSpec", "SyntheticScene", "generate_scene", "render_images",
]
