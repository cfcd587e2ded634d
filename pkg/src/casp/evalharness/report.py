"""End-to-end synthetic evaluation: scenes -> both matchers -> geometry -> AUC."""

from __future__ import annotations

import csv
import io
import json
import resource
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..cascade import DEFAULT_THETA, cascade_match
from ..geometry import GeometryError, corner_error, pose_error_deg, ransac
from ..refine import DEFAULT_WINDOW, refine_matches
from .metrics import HOMOGRAPHY_THRESHOLDS, POSE_THRESHOLDS, compute_auc, match_precision_recall
from .oracle import global_oracle_match
from .scenes import SceneSpec, generate_scene


@dataclass(frozen=True)
class EvalSpec:
    family: str = "homography"
    n_scenes: int = 10
    image_size: tuple[int, int] = (256, 256)
    channels: int = 128
    noise: float = 0.0
    margin: float | None = 10.0
    outlier_fraction: float = 0.0
    unpaired: str = "random"
    k: int = 8
    theta: float = DEFAULT_THETA
    window: int = DEFAULT_WINDOW
    refine: bool = True
    ransac_threshold: float = 2.0
    ransac_iterations: int = 1000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown eval spec keys: {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)

    def scene_spec(self, index: int) -> SceneSpec:
        return SceneSpec(
            self.family, self.image_size, self.channels, self.noise, self.margin, self.outlier_fraction,
            unpaired=self.unpaired, fine=self.refine, seed=self.seed * 100003 + index,
        )


@dataclass
class SceneResult:
    seed: int
    n_gt: int
    n_cascade: int
    n_oracle: int
    precision: float
    recall: float
    oracle_precision: float
    oracle_recall: float
    prior_complete: bool
    equal_to_oracle: bool
    error: float  # corner error (px) or pose error (deg); inf on failure
    oracle_error: float


@dataclass
class EvalReport:
    spec: dict
    scenes: list[SceneResult]
    thresholds: list[float]
    auc: list[float]
    oracle_auc: list[float]
    precision: float
    recall: float
    all_complete_equal: bool  # cascade == oracle on every prior-complete scene
    runtime: dict = field(default_factory=dict)  # seconds per stage, plus total
    peak_memory_mb: float = 0.0
    ops: dict = field(default_factory=dict)

    def accuracy_dict(self) -> dict:
        """Everything except timing and memory: identical across seeded re-runs."""
        return {
            "spec": self.spec,
            "thresholds": self.thresholds,
            "auc": self.auc,
            "oracle_auc": self.oracle_auc,
            "precision": self.precision,
            "recall": self.recall,
            "all_complete_equal": self.all_complete_equal,
            "scenes": [_finite(asdict(s)) for s in self.scenes],
        }

    def to_json(self, include_runtime: bool = False) -> str:
        d = self.accuracy_dict()
        if include_runtime:
            d["runtime"] = self.runtime
            d["peak_memory_mb"] = self.peak_memory_mb
        return json.dumps(d, indent=1, sort_keys=True)

    def runtime_json(self) -> str:
        return json.dumps({"runtime": self.runtime, "peak_memory_mb": self.peak_memory_mb}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(SceneResult)]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for s in self.scenes:
            writer.writerow([getattr(s, n) for n in names])
        return buf.getvalue()


def _finite(d: dict) -> dict:
    # JSON has no infinity; failures are written as null
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def _geometry_error(scene, pa: np.ndarray, pb: np.ndarray, spec: EvalSpec, seed: int) -> float:
    truth = scene.truth
    try:
        if truth.mode == "homography":
            res = ransac(pa, pb, "homography", spec.ransac_threshold, spec.ransac_iterations, seed)
            return corner_error(res.model, truth.H, truth.size_a[1], truth.size_a[0])
        res = ransac(pa, pb, "essential", spec.ransac_threshold, spec.ransac_iterations, seed, truth.K_a, truth.K_b)
        return pose_error_deg(res.R, res.t, truth.R, truth.t)
    except GeometryError:
        return float("inf")


def evaluate(spec: EvalSpec) -> EvalReport:
    runtime = {"extraction": 0.0, "interaction": 0.0, "matching": 0.0, "oracle": 0.0, "refinement": 0.0, "geometry": 0.0}
    results = []
    errors, oracle_errors = [], []
    t_start = time.perf_counter()
    for index in range(spec.n_scenes):
        sspec = spec.scene_spec(index)
        scene = generate_scene(sspec)
        gt = scene.gt

        t0 = time.perf_counter()
        matches, _ = cascade_match(scene.feat16_a, scene.feat16_b, scene.feat8_a, scene.feat8_b, spec.k, spec.theta)
        t1 = time.perf_counter()
        oracle = global_oracle_match(scene.feat8_a, scene.feat8_b, spec.theta)
        t2 = time.perf_counter()
        runtime["matching"] += t1 - t0
        runtime["oracle"] += t2 - t1

        pa, pb = matches.coords(gt.grid_a, gt.grid_b)
        oa, ob = oracle.coords(gt.grid_a, gt.grid_b)
        if scene.half_a is not None:
            if len(matches):
                pb = refine_matches(scene.half_a, scene.half_b, matches, gt.grid_a, gt.grid_b, spec.window).positions
            if len(oracle):
                ob = refine_matches(scene.half_a, scene.half_b, oracle, gt.grid_a, gt.grid_b, spec.window).positions
        t3 = time.perf_counter()
        runtime["refinement"] += t3 - t2
        err = _geometry_error(scene, pa, pb, spec, sspec.seed)
        oerr = _geometry_error(scene, oa, ob, spec, sspec.seed)
        runtime["geometry"] += time.perf_counter() - t3

        prec, rec = match_precision_recall(matches.pairs(), gt.pairs8)
        oprec, orec = match_precision_recall(oracle.pairs(), gt.pairs8)
        complete = scene.prior_complete(spec.k)
        results.append(SceneResult(
            sspec.seed, len(gt), len(matches), len(oracle), prec, rec, oprec, orec,
            complete, matches.pairs() == oracle.pairs(), float(err), float(oerr),
        ))
        errors.append(err)
        oracle_errors.append(oerr)
    runtime["total"] = time.perf_counter() - t_start
    thresholds = list(POSE_THRESHOLDS if spec.family == "posed-depth" else HOMOGRAPHY_THRESHOLDS)
    return EvalReport(
        spec={k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        scenes=results,
        thresholds=thresholds,
        auc=compute_auc(errors, thresholds),
        oracle_auc=compute_auc(oracle_errors, thresholds),
        precision=float(np.mean([r.precision for r in results])) if results else 1.0,
        recall=float(np.mean([r.recall for r in results])) if results else 1.0,
        all_complete_equal=all(r.equal_to_oracle for r in results if r.prior_complete),
        runtime=runtime,
        peak_memory_mb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
    )
