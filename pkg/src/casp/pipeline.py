"""End-to-end matcher: pyramid -> interaction -> priors -> RSCA -> matching -> refinement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, extract_pyramid
from .cascade import Mode, MatchSet, ScaleMap, ScoreMatrix, dual_softmax, inject_ground_truth, match_one_to_one
from .cascade import partial_confidence_dense, rsca_block, select_priors
from .config import PipelineConfig
from .interaction import InteractionState, run_hybrid
from .refine import RefinedMatches, fuse_level, fuse_to_half, refine_matches
from .supervision import GTAssignment, LossReport, SceneTruth, build_gt, coarse_loss, fine_losses, pool_pairs, total_loss
from .tensor import DTYPE
from .weights import init_weights

PAD_MULTIPLE = 32
SCORE_TEMPERATURE = 0.1


def score_tokens(fmap: np.ndarray) -> np.ndarray:
    """Rescale every token to norm ``sqrt(c)`` so scores become ``cos / SCORE_TEMPERATURE``.

    Raw dot products favour high-norm tokens; with cosine scores an image
    matched against itself always has its own token as the row maximum.
    """
    c = fmap.shape[-1]
    norm = np.linalg.norm(fmap, axis=-1, keepdims=True)
    return (fmap * (np.sqrt(c) / np.maximum(norm, 1e-12))).astype(DTYPE)


def _scores(fa: np.ndarray, fb: np.ndarray) -> ScoreMatrix:
    return ScoreMatrix.from_features(score_tokens(fa), score_tokens(fb), SCORE_TEMPERATURE)


def pad_image(image: np.ndarray, policy: str = "zero", multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Pad bottom/right so both extents are multiples of ``multiple``; the origin is unchanged."""
    img = np.asarray(image, dtype=DTYPE)
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel (H, W) image, got shape {img.shape}")
    h, w = img.shape
    ph, pw = -h % multiple, -w % multiple
    mode = "constant" if policy == "zero" else "edge"
    return np.pad(img, ((0, ph), (0, pw)), mode=mode)


@dataclass
class MatchResult:
    size_a: tuple[int, int]
    size_b: tuple[int, int]
    padded_a: tuple[int, int]
    padded_b: tuple[int, int]
    matches: MatchSet
    refined: RefinedMatches | None
    points_a: np.ndarray  # (n, 2) pixels, original frame
    points_b: np.ndarray  # (n, 2) refined pixels (coarse centers when refinement is skipped)
    coarse_b: np.ndarray  # (n, 2) coarse token centers in B
    grid_a: tuple[int, int] = (0, 0)  # padded 1/8 grids
    grid_b: tuple[int, int] = (0, 0)
    priors: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    timings: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.matches)

    def to_dict(self) -> dict:
        d = self.matches.to_dict(self.grid_a, self.grid_b, [self.size_a, self.size_b], refined=self.refined)
        d["padded_sizes"] = [list(map(int, self.padded_a)), list(map(int, self.padded_b))]
        return d


def _inside(pts: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return (pts[:, 0] < size[1]) & (pts[:, 1] < size[0])


def _reindex(pairs: np.ndarray, grid_from: tuple, grid_to: tuple, side: int) -> np.ndarray:
    y, x = np.divmod(pairs[:, side], grid_from[1])
    return y * grid_to[1] + x


class Matcher:
    """Runs the full pipeline with one set of weights.

    Without explicit weights it uses seeded random ones; such matches only
    demonstrate the mechanics and carry no accuracy meaning.
    """

    def __init__(self, config: PipelineConfig | None = None, weights: dict | None = None):
        self.config = config or PipelineConfig()
        self.backbone = BackboneConfig.for_variant(self.config.variant)
        if weights is None:
            weights = init_weights(self.config.variant, self.config.seed, self.config.n16_blocks, self.config.n8_blocks)
        self.weights = weights

    # -- shared stages -------------------------------------------------------

    def _features(self, img_a: np.ndarray, img_b: np.ndarray, timings: dict):
        cfg, w = self.config, self.weights
        t0 = time.perf_counter()
        pyr_a = extract_pyramid(img_a, self.backbone, w)
        pyr_b = extract_pyramid(img_b, self.backbone, w)
        t1 = time.perf_counter()
        state = run_hybrid(InteractionState(pyr_a[16], pyr_b[16], pyr_a[32], pyr_b[32]), w, cfg.n16_blocks)
        f8a = fuse_level(pyr_a[8], state.f16a, w, "fpn.l8")
        f8b = fuse_level(pyr_b[8], state.f16b, w, "fpn.l8")
        t2 = time.perf_counter()
        timings["extraction"] = t1 - t0
        timings["interaction"] = t2 - t1
        return pyr_a, pyr_b, state.f16a, state.f16b, f8a, f8b

    def _rsca(self, f8a, f8b, prior_a, prior_b):
        for b in range(self.config.n8_blocks):
            f8a, f8b = rsca_block(f8a, f8b, prior_a, prior_b, self.weights, f"rsca.b{b}")
        return f8a, f8b

    # -- inference -----------------------------------------------------------

    def match(self, image_a: np.ndarray, image_b: np.ndarray, refine: bool = True) -> MatchResult:
        cfg = self.config
        size_a, size_b = tuple(np.shape(image_a)), tuple(np.shape(image_b))
        img_a, img_b = pad_image(image_a, cfg.pad), pad_image(image_b, cfg.pad)
        timings: dict = {}
        pyr_a, pyr_b, f16a, f16b, f8a, f8b = self._features(img_a, img_b, timings)

        t0 = time.perf_counter()
        phi_a = ScaleMap(f16a.shape[0], f16a.shape[1])
        phi_b = ScaleMap(f16b.shape[0], f16b.shape[1])
        k = min(cfg.k, phi_a.n16, phi_b.n16)
        prior_a, prior_b = select_priors(_scores(f16a, f16b), k)
        f8a, f8b = self._rsca(f8a, f8b, prior_a, prior_b)
        matches = match_one_to_one(_scores(f8a, f8b), prior_a, prior_b, phi_a, phi_b, cfg.theta)
        grid_a, grid_b = f8a.shape[:2], f8b.shape[:2]
        pa, pb = matches.coords(grid_a, grid_b)
        keep = _inside(pa, size_a) & _inside(pb, size_b)  # tokens born from padding are dropped
        matches = MatchSet(matches.ia[keep], matches.ib[keep], matches.conf[keep])
        pa, pb = pa[keep], pb[keep]
        timings["matching"] = time.perf_counter() - t0

        refined = None
        points_b = pb.astype(np.float64)
        if refine and len(matches):
            t0 = time.perf_counter()
            half_a = fuse_to_half(f8a, pyr_a[4], pyr_a[2], self.weights)
            half_b = fuse_to_half(f8b, pyr_b[4], pyr_b[2], self.weights)
            refined = refine_matches(half_a, half_b, matches, grid_a, grid_b, cfg.w)
            points_b = refined.positions
            timings["refinement"] = time.perf_counter() - t0
        timings["total"] = sum(timings.values())
        return MatchResult(
            size_a, size_b, img_a.shape, img_b.shape, matches, refined,
            pa.astype(np.float64), points_b, pb.astype(np.float64), grid_a, grid_b, (prior_a, prior_b), timings,
        )

    # -- training-side math --------------------------------------------------

    def training_losses(self, image_a: np.ndarray, image_b: np.ndarray, truth: SceneTruth) -> LossReport:
        """Forward pass with supervision: dual softmax at 1/16, injected priors, all four losses.

        No parameters are updated; this evaluates the objective only.
        """
        cfg = self.config
        if cfg.mode_enum is not Mode.TRAIN_MATH:
            raise RuntimeError("training_losses needs mode = train-math")
        img_a, img_b = pad_image(image_a, cfg.pad), pad_image(image_b, cfg.pad)
        pyr_a, pyr_b, f16a, f16b, f8a, f8b = self._features(img_a, img_b, {})
        grid_a, grid_b = f8a.shape[:2], f8b.shape[:2]
        gt = self._padded_gt(build_gt(truth), grid_a, grid_b)

        p16 = dual_softmax(_scores(f16a, f16b))
        l16 = coarse_loss(p16, gt.pairs16)
        phi_a = ScaleMap(f16a.shape[0], f16a.shape[1])
        phi_b = ScaleMap(f16b.shape[0], f16b.shape[1])
        k = min(cfg.k, phi_a.n16, phi_b.n16)
        prior_a, prior_b = inject_ground_truth(p16, gt.pairs16, k)
        f8a, f8b = self._rsca(f8a, f8b, prior_a, prior_b)
        s8 = _scores(f8a, f8b).full()
        p8 = partial_confidence_dense(s8, prior_a, prior_b, phi_a, phi_b)
        l8 = coarse_loss(p8, gt.pairs8)

        gt_matches = MatchSet(gt.pairs8[:, 0], gt.pairs8[:, 1], np.ones(len(gt), DTYPE))
        half_a = fuse_to_half(f8a, pyr_a[4], pyr_a[2], self.weights)
        half_b = fuse_to_half(f8b, pyr_b[4], pyr_b[2], self.weights)
        refined = refine_matches(half_a, half_b, gt_matches, grid_a, grid_b, cfg.w)
        lf, lsub, _ = fine_losses(refined.correlations, refined.positions, refined.centers_b, gt.fine_b)
        return total_loss(l16, l8, lf, lsub, cfg.lambdas)

    @staticmethod
    def _padded_gt(gt: GTAssignment, grid_a: tuple, grid_b: tuple) -> GTAssignment:
        """Re-index ground truth from the unpadded token grids to the padded ones."""
        pairs = np.stack([_reindex(gt.pairs8, gt.grid_a, grid_a, 0), _reindex(gt.pairs8, gt.grid_b, grid_b, 1)], axis=1)
        return GTAssignment(grid_a, grid_b, pairs, pool_pairs(pairs, grid_a, grid_b, gt.r), gt.fine_b, gt.r)
