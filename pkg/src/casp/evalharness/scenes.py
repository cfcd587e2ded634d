"""Synthetic two-view scenes with known geometry and ideal descriptors.

Coarse descriptors are attached to B tokens: a random per-token part plus
a smooth field of the B-frame position. A tokens copy their ground-truth
partner's descriptor (plus noise) so the correct match is known and its
score margin over distractors can be set exactly by rescaling. The 1/16
maps are 2x2 averages of the 1/8 maps.

The optional fine field is a continuous random-Fourier descriptor of the
scene point, sampled on the 1/2 grids of both views for refinement.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..cascade import ScaleMap, ScoreMatrix, select_priors
from ..geometry import dlt_homography
from ..rng import make_rng
from ..supervision import GTAssignment, SceneTruth, build_gt, grid_centers
from ..tensor import DTYPE, avgpool2

FAMILIES = ("identity", "translation", "rotation+scale", "homography", "posed-depth")
FINE_CHANNELS = 64


@dataclass(frozen=True)
class SceneSpec:
    family: str = "homography"
    image_size: tuple[int, int] = (256, 256)  # (H, W), multiples of 32
    channels: int = 128
    noise: float = 0.0
    margin: float | None = 10.0
    outlier_fraction: float = 0.0
    smooth_weight: float = 0.5
    unpaired: str = "random"  # descriptors of tokens without a partner: "random" or "blank" (zero)
    fine: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown scene family {self.family!r}; expected one of {FAMILIES}")
        h, w = self.image_size
        if h % 32 or w % 32:
            raise ValueError("scene image size must be a multiple of 32")
        if self.unpaired not in ("random", "blank"):
            raise ValueError("unpaired must be 'random' or 'blank'")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    truth: SceneTruth
    gt: GTAssignment
    feat8_a: np.ndarray
    feat8_b: np.ndarray
    feat16_a: np.ndarray
    feat16_b: np.ndarray
    margin: float  # achieved minimum GT score margin (inlier pairs)
    inliers: np.ndarray  # (n_gt,) bool: GT pair kept its descriptor
    half_a: np.ndarray | None = None
    half_b: np.ndarray | None = None

    @property
    def phi_a(self) -> ScaleMap:
        return ScaleMap(self.feat16_a.shape[0], self.feat16_a.shape[1])

    @property
    def phi_b(self) -> ScaleMap:
        return ScaleMap(self.feat16_b.shape[0], self.feat16_b.shape[1])

    def priors(self, k: int):
        return select_priors(ScoreMatrix.from_features(self.feat16_a, self.feat16_b), k)

    def prior_complete(self, k: int) -> bool:
        """Do the top-``k`` priors of both views contain every ground-truth 1/16 pair?"""
        prior_a, prior_b = self.priors(k)
        for i16, j16 in self.gt.pairs16:
            if j16 not in prior_a[i16] or i16 not in prior_b[j16]:
                return False
        return True


# --- geometry --------------------------------------------------------------


def _homography_for(family: str, size, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    if family == "identity":
        return np.eye(3)
    if family == "translation":
        tx, ty = rng.uniform(-w / 8, w / 8), rng.uniform(-h / 8, h / 8)
        return np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]])
    cx, cy = (w - 1) / 2, (h - 1) / 2
    if family == "rotation+scale":
        th = np.radians(rng.uniform(-20, 20))
        s = np.exp(rng.uniform(np.log(0.8), np.log(1.25)))
        A = s * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        t = np.array([cx, cy]) - A @ np.array([cx, cy]) + rng.uniform(-8, 8, 2)
        return np.array([[A[0, 0], A[0, 1], t[0]], [A[1, 0], A[1, 1], t[1]], [0, 0, 1.0]])
    # full homography: perturb the image corners
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    moved = corners + rng.uniform(-0.12, 0.12, (4, 2)) * np.array([w, h])
    return dlt_homography(corners, moved)


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


# two-plane world: tilted background z = BG_Z + BG_SLOPE * y, plus a bounded
# fronto-parallel foreground rectangle at z = FG_Z
BG_Z, BG_SLOPE = 10.0, 0.15
FG_Z, FG_HALF = 5.0, (1.0, 0.8)


def render_depth(K: np.ndarray, R: np.ndarray, t: np.ndarray, size) -> np.ndarray:
    """Per-pixel camera depth of the two-plane world seen by camera ``(R, t)``."""
    h, w = size
    y, x = np.mgrid[0:h, 0:w]
    pix = np.stack([x.ravel(), y.ravel(), np.ones(h * w)], axis=1).astype(np.float64)
    d = (pix @ np.linalg.inv(K).T) @ R  # world ray directions (R^T d)
    C = -R.T @ t
    with np.errstate(divide="ignore", invalid="ignore"):
        s_bg = (BG_Z - C[2] + BG_SLOPE * C[1]) / (d[:, 2] - BG_SLOPE * d[:, 1])
        s_fg = (FG_Z - C[2]) / d[:, 2]
    X_fg = C + s_fg[:, None] * d
    fg_ok = (s_fg > 0) & (np.abs(X_fg[:, 0]) <= FG_HALF[0]) & (np.abs(X_fg[:, 1]) <= FG_HALF[1])
    s = np.where(s_bg > 0, s_bg, np.inf)
    s = np.where(fg_ok & (s_fg < s), s_fg, s)
    X = C + np.where(np.isfinite(s), s, 0)[:, None] * d
    z = X @ R.T + t
    depth = np.where(np.isfinite(s), z[:, 2], 0.0)
    return depth.reshape(h, w).astype(np.float32)


def _posed_truth(size, rng: np.random.Generator) -> SceneTruth:
    h, w = size
    f = 0.9 * w
    K = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1.0]])
    R = _rotation(*np.radians(rng.uniform(-3, 3, 3)))
    direction = np.array([rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)])
    t = 0.8 * direction / np.linalg.norm(direction)
    depth_a = render_depth(K, np.eye(3), np.zeros(3), size)
    depth_b = render_depth(K, R, t, size)
    return SceneTruth("posed-depth", tuple(size), tuple(size), K_a=K, K_b=K.copy(), R=R, t=t, depth_a=depth_a, depth_b=depth_b)


def make_truth(family: str, size, rng: np.random.Generator) -> SceneTruth:
    if family == "posed-depth":
        return _posed_truth(size, rng)
    return SceneTruth("homography", tuple(size), tuple(size), H=_homography_for(family, size, rng))


# --- descriptors -----------------------------------------------------------


class FourierField:
    """Smooth random descriptor field ``cos(<omega_c, p> + phase_c)`` over pixel positions."""

    def __init__(self, channels: int, wavelengths: tuple[float, float], rng: np.random.Generator):
        lam = rng.uniform(*wavelengths, channels)
        ang = rng.uniform(0, 2 * np.pi, channels)
        self.omega = np.stack([np.cos(ang), np.sin(ang)], axis=1) * (2 * np.pi / lam)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, channels)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return np.cos(np.asarray(pts, dtype=np.float64) @ self.omega.T + self.phase)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _min_margin(fa: np.ndarray, fb: np.ndarray, pairs: np.ndarray) -> float:
    """Smallest gap between a GT score and the best distractor in its row or column."""
    if len(pairs) == 0:
        return np.inf
    S = ScoreMatrix(fa, fb).full().astype(np.float64)
    i, j = pairs[:, 0], pairs[:, 1]
    gt = S[i, j]
    row = S[i].copy()
    row[np.arange(len(i)), j] = -np.inf
    col = S[:, j].T.copy()
    col[np.arange(len(i)), i] = -np.inf
    return float(np.min(gt - np.maximum(row.max(axis=1), col.max(axis=1))))


def _coarse_descriptors(spec: SceneSpec, gt: GTAssignment, rng: np.random.Generator):
    c = spec.channels
    (ha, wa), (hb, wb) = gt.grid_a, gt.grid_b
    na, nb = ha * wa, hb * wb
    smooth = FourierField(c, (48.0, 128.0), rng)
    wgt = spec.smooth_weight
    fb = _unit((1 - wgt) * _unit(rng.normal(size=(nb, c))) + wgt * _unit(smooth(grid_centers(hb, wb))))
    fa = _unit(rng.normal(size=(na, c)))
    i, j = gt.pairs8[:, 0], gt.pairs8[:, 1]
    if spec.unpaired == "blank":
        paired_b = np.zeros(nb, bool)
        paired_b[j] = True
        fb[~paired_b] = 0.0
        fa[:] = 0.0
    outlier = rng.random(len(i)) < spec.outlier_fraction
    keep = ~outlier
    fa[i[keep]] = fb[j[keep]] + spec.noise * rng.normal(size=(int(keep.sum()), c)) / np.sqrt(c)
    margin = _min_margin(fa, fb, gt.pairs8[keep])
    if spec.margin is not None and np.isfinite(margin):
        if margin <= 0:
            raise ValueError(f"noise {spec.noise} leaves a non-positive raw margin; cannot reach {spec.margin}")
        alpha = np.sqrt(spec.margin / margin)
        fa, fb = fa * alpha, fb * alpha
        margin = _min_margin(fa, fb, gt.pairs8[keep])
    fa = fa.reshape(ha, wa, c).astype(DTYPE)
    fb = fb.reshape(hb, wb, c).astype(DTYPE)
    return fa, fb, margin, keep


def _fine_maps(truth: SceneTruth, rng: np.random.Generator):
    field = FourierField(FINE_CHANNELS, (6.0, 16.0), rng)
    (ha, wa), (hb, wb) = truth.size_a, truth.size_b
    pa = grid_centers(ha // 2, wa // 2, 2)
    pb = grid_centers(hb // 2, wb // 2, 2)
    back, ok = truth.warp_b_to_a(pb)
    if truth.mode == "homography":
        # the field extends past the image border, so every B sample has a scene point
        ok = np.all(np.isfinite(back), axis=1)
    half_b = np.where(ok[:, None], field(np.where(ok[:, None], back, 0.0)), 0.0)
    half_a = field(pa)
    return (
        half_a.reshape(ha // 2, wa // 2, -1).astype(DTYPE),
        half_b.reshape(hb // 2, wb // 2, -1).astype(DTYPE),
    )


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Deterministic scene for ``spec`` (same spec -> identical arrays)."""
    truth = make_truth(spec.family, spec.image_size, make_rng(spec.seed, "scene", "geometry"))
    gt = build_gt(truth)
    fa, fb, margin, keep = _coarse_descriptors(spec, gt, make_rng(spec.seed, "scene", "descriptors"))
    scene = SyntheticScene(spec, truth, gt, fa, fb, avgpool2(fa), avgpool2(fb), margin, keep)
    if spec.fine:
        scene.half_a, scene.half_b = _fine_maps(truth, make_rng(spec.seed, "scene", "fine"))
    return scene


def render_images(truth: SceneTruth, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale views of a textured plane in ``[0, 1]`` (homography scenes only)."""
    if truth.mode != "homography":
        raise ValueError("rendering is only defined for planar scenes")
    rng = make_rng(seed, "texture")
    field = FourierField(24, (6.0, 40.0), rng)
    gains = rng.uniform(0.5, 1.0, 24)

    def shade(pts):
        v = field(pts) @ gains / gains.sum()
        return 0.5 + 0.5 * v

    (ha, wa), (hb, wb) = truth.size_a, truth.size_b
    img_a = shade(grid_centers(ha, wa, 1)).reshape(ha, wa)
    back, _ = truth.warp_b_to_a(grid_centers(hb, wb, 1))
    img_b = shade(back).reshape(hb, wb)
    return img_a.astype(DTYPE), img_b.astype(DTYPE)
