"""Ground-truth construction from scene geometry and the matching losses.

Ground truth lives on the 1/8 token grids: token ``u`` of view A sits at
pixel ``8 * u``; it is warped into B and assigned to the nearest B token.
Only mutual-nearest pairs survive, which makes the set one-to-one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import apply_homography

EPS = 1e-12
DEPTH_TOLERANCE = 0.2
DEFAULT_LAMBDAS = (0.5, 0.5, 0.25, 1.0)


class EmptyGroundTruth(ValueError):
    """No ground-truth pairs: the loss is undefined and the pair should be skipped."""


@dataclass
class SceneTruth:
    """Homography or calibrated two-view geometry with depth maps.

    ``R, t`` map A-camera coordinates to B-camera coordinates. Depth maps are
    per-pixel z values; non-positive entries mark invalid pixels.
    """

    mode: str
    size_a: tuple[int, int]  # (H, W)
    size_b: tuple[int, int]
    H: np.ndarray | None = None
    K_a: np.ndarray | None = None
    K_b: np.ndarray | None = None
    R: np.ndarray | None = None
    t: np.ndarray | None = None
    depth_a: np.ndarray | None = None
    depth_b: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "homography":
            if self.H is None:
                raise ValueError("homography scene needs H")
            self.H = np.asarray(self.H, dtype=np.float64)
            if abs(np.linalg.det(self.H)) < 1e-12:
                raise ValueError("H must be invertible")
        elif self.mode == "posed-depth":
            for name in ("K_a", "K_b", "R", "t", "depth_a", "depth_b"):
                if getattr(self, name) is None:
                    raise ValueError(f"posed-depth scene needs {name}")
            self.depth_a = np.asarray(self.depth_a, dtype=np.float32)
            self.depth_b = np.asarray(self.depth_b, dtype=np.float32)
        else:
            raise ValueError(f"unknown scene mode {self.mode!r}")

    def warp_a_to_b(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map A pixels into B; returns positions and a validity mask."""
        if self.mode == "homography":
            return _warp_h(self.H, pts, self.size_b)
        return _warp_depth(pts, self.depth_a, self.depth_b, self.K_a, self.K_b, self.R, self.t, self.size_b)

    def warp_b_to_a(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == "homography":
            return _warp_h(np.linalg.inv(self.H), pts, self.size_a)
        R_inv = self.R.T
        t_inv = -R_inv @ self.t
        return _warp_depth(pts, self.depth_b, self.depth_a, self.K_b, self.K_a, R_inv, t_inv, self.size_a)

    def save(self, path) -> None:
        """JSON header next to raw float32 depth maps (``<stem>.depth_a.raw`` etc.)."""
        path = Path(path)
        header = {"mode": self.mode, "size_a": list(self.size_a), "size_b": list(self.size_b)}
        for name in ("H", "K_a", "K_b", "R", "t"):
            v = getattr(self, name)
            if v is not None:
                header[name] = np.asarray(v, dtype=np.float64).tolist()
        if self.mode == "posed-depth":
            for name in ("depth_a", "depth_b"):
                raw = path.with_suffix(f".{name}.raw")
                getattr(self, name).astype("<f4").tofile(raw)
                header[name] = raw.name
        path.write_text(json.dumps(header, indent=1))

    @classmethod
    def load(cls, path) -> "SceneTruth":
        path = Path(path)
        header = json.loads(path.read_text())
        kw = {"mode": header["mode"], "size_a": tuple(header["size_a"]), "size_b": tuple(header["size_b"])}
        for name in ("H", "K_a", "K_b", "R", "t"):
            if name in header:
                kw[name] = np.asarray(header[name], dtype=np.float64)
        for name, size in (("depth_a", kw["size_a"]), ("depth_b", kw["size_b"])):
            if name in header:
                kw[name] = np.fromfile(path.parent / header[name], dtype="<f4").reshape(size)
        return cls(**kw)


def _inside(pts: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)


def _warp_h(H, pts, size):
    pts = np.asarray(pts, dtype=np.float64)
    q = np.hstack([pts, np.ones((len(pts), 1))]) @ H.T
    ok = q[:, 2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = apply_homography(H, pts)
    ok &= np.all(np.isfinite(out), axis=1)
    ok &= _inside(np.where(ok[:, None], out, -1.0), size)
    return out, ok


def _nearest_depth(depth: np.ndarray, pts: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    x = np.clip(np.rint(pts[:, 0]).astype(np.intp), 0, w - 1)
    y = np.clip(np.rint(pts[:, 1]).astype(np.intp), 0, h - 1)
    return depth[y, x].astype(np.float64)


def _warp_depth(pts, depth_src, depth_dst, K_src, K_dst, R, t, size_dst):
    """Unproject with source depth, transform, project; keep depth-consistent points."""
    pts = np.asarray(pts, dtype=np.float64)
    z = _nearest_depth(depth_src, pts)
    rays = np.hstack([pts, np.ones((len(pts), 1))]) @ np.linalg.inv(K_src).T
    X = rays * z[:, None]
    Xd = X @ np.asarray(R).T + np.asarray(t)
    zd = Xd[:, 2]
    ok = (z > 0) & (zd > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = (Xd / zd[:, None]) @ np.asarray(K_dst).T
    out = proj[:, :2]
    ok &= np.all(np.isfinite(out), axis=1)
    ok &= _inside(np.where(ok[:, None], out, -1.0), size_dst)
    observed = _nearest_depth(depth_dst, np.where(ok[:, None], out, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(observed - zd) / zd
    ok &= (observed > 0) & (rel <= DEPTH_TOLERANCE)
    return out, ok


def grid_centers(h8: int, w8: int, stride: int = 8) -> np.ndarray:
    """Pixel ``(x, y)`` of every token of an ``h8 x w8`` grid, row-major."""
    y, x = np.mgrid[0:h8, 0:w8]
    return np.stack([x.ravel(), y.ravel()], axis=1).astype(np.float64) * stride


def _nearest_token(pts: np.ndarray, ok: np.ndarray, h8: int, w8: int, stride: int) -> np.ndarray:
    cell = np.rint(np.where(ok[:, None], pts, 0.0) / stride).astype(np.int64)
    ok = ok & (cell[:, 0] >= 0) & (cell[:, 0] < w8) & (cell[:, 1] >= 0) & (cell[:, 1] < h8)
    return np.where(ok, cell[:, 1] * w8 + cell[:, 0], -1)


@dataclass
class GTAssignment:
    """One-to-one 1/8 pairs, their 1/16 image, and exact warped B positions."""

    grid_a: tuple[int, int]
    grid_b: tuple[int, int]
    pairs8: np.ndarray  # (n, 2) flattened 1/8 token indices
    pairs16: np.ndarray  # (m, 2) flattened 1/16 token indices
    fine_b: np.ndarray  # (n, 2) warped pixel position of each A token center
    r: int = 2
    partner: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.partner = {int(i): int(j) for i, j in self.pairs8}

    def __len__(self) -> int:
        return len(self.pairs8)


def pool_pairs(pairs8: np.ndarray, grid_a, grid_b, r: int = 2) -> np.ndarray:
    """Max-pool a one-hot 1/8 assignment: divide both 2-D indices by ``r``."""
    pairs8 = np.asarray(pairs8, dtype=np.int64).reshape(-1, 2)
    ya, xa = np.divmod(pairs8[:, 0], grid_a[1])
    yb, xb = np.divmod(pairs8[:, 1], grid_b[1])
    i16 = (ya // r) * (grid_a[1] // r) + xa // r
    j16 = (yb // r) * (grid_b[1] // r) + xb // r
    return np.unique(np.stack([i16, j16], axis=1), axis=0).reshape(-1, 2)


def build_gt(scene: SceneTruth, stride: int = 8, r: int = 2) -> GTAssignment:
    """Mutual-nearest token correspondences induced by the scene geometry."""
    grid_a = (scene.size_a[0] // stride, scene.size_a[1] // stride)
    grid_b = (scene.size_b[0] // stride, scene.size_b[1] // stride)
    ca = grid_centers(*grid_a, stride)
    cb = grid_centers(*grid_b, stride)
    wa, oka = scene.warp_a_to_b(ca)
    wb, okb = scene.warp_b_to_a(cb)
    j_of_i = _nearest_token(wa, oka, *grid_b, stride)
    i_of_j = _nearest_token(wb, okb, *grid_a, stride)
    i = np.nonzero(j_of_i >= 0)[0]
    j = j_of_i[i]
    mutual = i_of_j[j] == i
    i, j = i[mutual], j[mutual]
    pairs8 = np.stack([i, j], axis=1).astype(np.int64).reshape(-1, 2)
    return GTAssignment(grid_a, grid_b, pairs8, pool_pairs(pairs8, grid_a, grid_b, r), wa[i], r)


# --- losses ----------------------------------------------------------------


def _gt_index(gt_pairs) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    if len(gt) == 0:
        raise EmptyGroundTruth("no ground-truth pairs")
    return gt[:, 0], gt[:, 1]


def coarse_loss(P: np.ndarray, gt_pairs, eps: float = EPS) -> float:
    """Mean negative log confidence over the ground-truth pairs."""
    i, j = _gt_index(gt_pairs)
    p = np.asarray(P, dtype=np.float64)[i, j]
    return float(-np.mean(np.log(p + eps)))


def _softmax64(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def coarse_loss_grad(S: np.ndarray, gt_pairs, eps: float = EPS) -> np.ndarray:
    """Exact ``dL/dS`` of ``coarse_loss(dual_softmax(S))``.

    With ``P = R * C`` (row and column softmax), each ground-truth pair
    ``(i, j)`` contributes ``w * (e_j - R[i, :])`` to row ``i`` and
    ``w * (e_i - C[:, j])`` to column ``j``, where
    ``w = -P[i, j] / (|M| (P[i, j] + eps))``.
    """
    i, j = _gt_index(gt_pairs)
    S = np.asarray(S, dtype=np.float64)
    R = _softmax64(S, 1)
    C = _softmax64(S, 0)
    p = R[i, j] * C[i, j]
    w = -p / ((p + eps) * len(i))
    g = np.zeros_like(S)
    np.add.at(g, i, -w[:, None] * R[i])
    np.add.at(g, (i, j), w)
    np.add.at(g.T, j, -w[:, None] * C[:, j].T)
    np.add.at(g, (i, j), w)
    return g


def fine_losses(
    correlations: np.ndarray,
    positions: np.ndarray,
    centers_b: np.ndarray,
    gt_positions: np.ndarray,
    temperature: float = 0.1,
) -> tuple[float, float, int]:
    """Window-correlation NLL at the ground-truth pixel and mean squared sub-pixel error.

    ``correlations`` are the ``(n, 2w-1, 2w-1)`` pixel-stage maps centered on
    ``centers_b``. Only matches whose ground truth lies inside the window
    count; returns ``(L_f, L_sub, n_used)`` with zero losses if none do.
    """
    corr = np.asarray(correlations, dtype=np.float64)
    n, size, _ = corr.shape if corr.ndim == 3 else (0, 1, 1)
    half = (size - 1) // 2
    rel = np.asarray(gt_positions, dtype=np.float64).reshape(-1, 2) - np.asarray(centers_b, dtype=np.float64).reshape(-1, 2)
    cell = np.rint(rel).astype(np.int64)
    inside = np.all(np.abs(cell) <= half, axis=1)
    if not inside.any():
        return 0.0, 0.0, 0
    logits = corr[inside].reshape(-1, size * size) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    flat = (cell[inside, 1] + half) * size + (cell[inside, 0] + half)
    l_f = float(-logp[np.arange(len(flat)), flat].mean())
    d = np.asarray(positions, dtype=np.float64).reshape(-1, 2)[inside] - np.asarray(gt_positions, dtype=np.float64).reshape(-1, 2)[inside]
    l_sub = float((d**2).sum(axis=1).mean())
    return l_f, l_sub, int(inside.sum())


@dataclass
class LossReport:
    coarse16: float
    coarse8: float
    fine: float
    subpixel: float
    lambdas: tuple[float, float, float, float] = DEFAULT_LAMBDAS
    total: float = 0.0

    def as_dict(self) -> dict:
        return {
            "coarse16": self.coarse16,
            "coarse8": self.coarse8,
            "fine": self.fine,
            "subpixel": self.subpixel,
            "lambdas": list(self.lambdas),
            "total": self.total,
        }


def total_loss(coarse16: float, coarse8: float, fine: float, subpixel: float, lambdas=DEFAULT_LAMBDAS) -> LossReport:
    l1, l2, l3, l4 = lambdas
    total = l1 * coarse16 + l2 * coarse8 + l3 * fine + l4 * subpixel
    return LossReport(coarse16, coarse8, fine, subpixel, tuple(lambdas), total)
