"""Two-view geometry: normalized DLT homographies, the 8-point essential
matrix, vanilla RANSAC, and pose/corner error measures.

Points are ``(N, 2)`` arrays of ``(x, y)``. All solves run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng


class GeometryError(ValueError):
    """Too few or degenerate correspondences for the requested model."""


def normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: zero mean, mean distance sqrt(2)."""
    pts = np.asarray(pts, dtype=np.float64)
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (pts - c) * s, T


def to_homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = to_homogeneous(np.asarray(pts, dtype=np.float64)) @ np.asarray(H, dtype=np.float64).T
    return q[:, :2] / q[:, 2:3]


def dlt_homography(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray | None:
    """Homography mapping ``src`` to ``dst`` by (weighted) normalized DLT.

    Returns ``None`` when the linear system is rank deficient.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        return None
    sn, Ts = normalize_points(src)
    dn, Td = normalize_points(dst)
    n = len(src)
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    z, o = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=1)
    A[1::2] = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=1)
    if weights is not None:
        A *= np.repeat(np.sqrt(np.asarray(weights, dtype=np.float64)), 2)[:, None]
    _, sv, vt = np.linalg.svd(A)
    # second-smallest singular value must be clearly nonzero (rank 8)
    tol = 1e-10 * sv[0]
    if sv[min(7, sv.size - 1)] <= tol:
        return None
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def homography_residuals(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(apply_homography(H, src) - dst, axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray | None:
    """Essential matrix from >= 8 calibrated correspondences (``xb^T E xa = 0``)."""
    if len(xa) < 8:
        return None
    an, Ta = normalize_points(xa)
    bn, Tb = normalize_points(xb)
    A = np.einsum("ni,nj->nij", to_homogeneous(bn), to_homogeneous(an)).reshape(len(xa), 9)
    _, sv, vt = np.linalg.svd(A)
    if sv[min(7, sv.size - 1)] <= 1e-10 * sv[0]:
        return None
    E = Tb.T @ vt[-1].reshape(3, 3) @ Ta
    u, _, wt = np.linalg.svd(E)
    E = u @ np.diag([1.0, 1.0, 0.0]) @ wt
    return E / np.linalg.norm(E)


def sampson_distance(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha, hb = to_homogeneous(xa), to_homogeneous(xb)
    Ea = ha @ E.T
    Etb = hb @ E
    num = np.einsum("ni,ni->n", hb, Ea) ** 2
    den = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.where(den > 0, num / den, np.inf))


def _triangulate_depths(R, t, xa, xb):
    """Depths of calibrated points in both cameras (linear triangulation)."""
    P0 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P1 = np.hstack([R, t[:, None]])
    A = np.stack([
        xa[:, 0:1] * P0[2] - P0[0],
        xa[:, 1:2] * P0[2] - P0[1],
        xb[:, 0:1] * P1[2] - P1[0],
        xb[:, 1:2] * P1[2] - P1[1],
    ], axis=1)
    X = np.linalg.svd(A)[2][:, -1]
    far = np.abs(X[:, 3]) <= 1e-12
    X = np.where(far[:, None], X[:, :3] * 1e12, X[:, :3] / np.where(far, 1.0, X[:, 3])[:, None])
    return np.stack([X[:, 2], (X @ R.T + t)[:, 2]], axis=1)


def recover_pose(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pick the (R, t) decomposition of ``E`` placing most points in front of both cameras."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    best, best_n = None, -1
    for R in (u @ W @ vt, u @ W.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            d = _triangulate_depths(R, t, xa, xb)
            n = int(((d[:, 0] > 0) & (d[:, 1] > 0)).sum())
            if n > best_n:
                best, best_n = (R, t), n
    return best


def _normalize_batch(pts: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization of ``(B, m, 2)`` point sets over the points in ``mask``."""
    if mask is None:
        mask = np.ones(pts.shape[:2], bool)
    cnt = np.maximum(mask.sum(axis=1), 1)[:, None]
    c = (pts * mask[..., None]).sum(axis=1) / cnt
    dist = np.sqrt(((pts - c[:, None]) ** 2).sum(axis=2))
    d = (dist * mask).sum(axis=1) / cnt[:, 0]
    s = np.where(d > 0, np.sqrt(2.0) / np.where(d > 0, d, 1.0), 1.0)
    T = np.zeros((len(pts), 3, 3))
    T[:, 0, 0] = T[:, 1, 1] = s
    T[:, 0, 2] = -s * c[:, 0]
    T[:, 1, 2] = -s * c[:, 1]
    T[:, 2, 2] = 1.0
    return (pts - c[:, None]) * s[:, None, None], T


def dlt_homography_batch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched (weighted) normalized DLT on ``(B, m, 2)`` point sets.

    Points with zero weight are ignored entirely. Returns the models and a
    mask of the non-degenerate ones (rank 8, finite, ``H[2, 2] != 0``).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(src.shape[:2]) if weights is None else np.asarray(weights, dtype=np.float64)
    mask = w > 0
    sn, Ts = _normalize_batch(src, mask)
    dn, Td = _normalize_batch(dst, mask)
    x, y = sn[..., 0], sn[..., 1]
    u, v = dn[..., 0], dn[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    B, m = x.shape
    A = np.empty((B, 2 * m, 9))
    A[:, 0::2] = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=2)
    A[:, 1::2] = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=2)
    A *= np.repeat(np.sqrt(np.where(mask, w, 0.0)), 2, axis=1)[..., None]
    _, sv, vt = np.linalg.svd(A)
    ok = (mask.sum(axis=1) >= 4) & (sv[:, min(7, sv.shape[1] - 1)] > 1e-10 * sv[:, 0])
    H = np.linalg.inv(Td) @ vt[:, -1].reshape(B, 3, 3) @ Ts
    ok &= np.abs(H[:, 2, 2]) >= 1e-12
    H = H / np.where(ok, H[:, 2, 2], 1.0)[:, None, None]
    ok &= np.all(np.isfinite(H), axis=(1, 2))
    return H, ok


_dlt_batch = dlt_homography_batch


def _eight_point_batch(xa: np.ndarray, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    an, Ta = _normalize_batch(xa)
    bn, Tb = _normalize_batch(xb)
    ha = np.concatenate([an, np.ones(an.shape[:2] + (1,))], axis=2)
    hb = np.concatenate([bn, np.ones(bn.shape[:2] + (1,))], axis=2)
    A = np.einsum("bni,bnj->bnij", hb, ha).reshape(len(xa), xa.shape[1], 9)
    _, sv, vt = np.linalg.svd(A)
    ok = sv[:, min(7, sv.shape[1] - 1)] > 1e-10 * sv[:, 0]
    E = np.swapaxes(Tb, 1, 2) @ vt[:, -1].reshape(-1, 3, 3) @ Ta
    u, _, wt = np.linalg.svd(E)
    E = u @ (np.array([1.0, 1.0, 0.0])[:, None] * wt)
    E = E / np.linalg.norm(E, axis=(1, 2))[:, None, None]
    return E, ok


def _homography_residuals_batch(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    q = to_homogeneous(src) @ np.swapaxes(H, 1, 2)  # (B, n, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(q[..., :2] / q[..., 2:3] - dst, axis=2)
    return np.where(np.isfinite(err), err, np.inf)


def _sampson_batch(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha, hb = to_homogeneous(xa), to_homogeneous(xb)
    Ea = ha @ np.swapaxes(E, 1, 2)  # (B, n, 3): rows E @ xa
    Etb = hb @ E  # rows E^T @ xb
    num = (Ea * hb).sum(axis=2) ** 2
    den = Ea[..., 0] ** 2 + Ea[..., 1] ** 2 + Etb[..., 0] ** 2 + Etb[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.where(den > 0, num / den, np.inf))


RANSAC_CHUNK = 256


@dataclass
class GeometryResult:
    model: np.ndarray
    inliers: np.ndarray
    R: np.ndarray | None = None
    t: np.ndarray | None = None


def ransac(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    model: str = "homography",
    threshold: float = 2.0,
    iterations: int = 1000,
    seed: int = 0,
    K_a: np.ndarray | None = None,
    K_b: np.ndarray | None = None,
) -> GeometryResult:
    """Vanilla RANSAC with fixed iteration count and a refit on the best consensus set.

    ``threshold`` is in pixels. For the essential model it is divided by
    the mean focal length and compared with the Sampson distance in
    calibrated coordinates.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    if model == "homography":
        m = 4
        fit = dlt_homography
        resid = homography_residuals
        fit_batch, resid_batch = _dlt_batch, _homography_residuals_batch
        xa, xb, thr = pts_a, pts_b, threshold
    elif model == "essential":
        if K_a is None or K_b is None:
            raise GeometryError("essential model needs intrinsics")
        m = 8
        fit = eight_point
        resid = sampson_distance
        fit_batch, resid_batch = _eight_point_batch, _sampson_batch
        xa = (to_homogeneous(pts_a) @ np.linalg.inv(K_a).T)[:, :2]
        xb = (to_homogeneous(pts_b) @ np.linalg.inv(K_b).T)[:, :2]
        thr = threshold / np.mean([K_a[0, 0], K_a[1, 1], K_b[0, 0], K_b[1, 1]])
    else:
        raise ValueError(f"unknown model {model!r}")
    n = len(xa)
    if n < m:
        raise GeometryError(f"{model} needs at least {m} matches, got {n}")

    rng = make_rng(seed, "ransac")
    samples = np.stack([rng.choice(n, size=m, replace=False) for _ in range(iterations)]) if iterations else np.zeros((0, m), int)
    best_M, best_mask, best_count = None, None, -1
    for c0 in range(0, len(samples), RANSAC_CHUNK):
        idx = samples[c0 : c0 + RANSAC_CHUNK]
        models, ok = fit_batch(xa[idx], xb[idx])
        masks = resid_batch(models, xa, xb) < thr
        counts = np.where(ok, masks.sum(axis=1), -1)
        b = int(np.argmax(counts))  # first best, as a sequential scan would keep
        if counts[b] > best_count:
            best_M, best_mask, best_count = models[b], masks[b], int(counts[b])
    if best_M is None:
        raise GeometryError(f"no non-degenerate {model} sample found")
    if best_count >= m:
        M = fit(xa[best_mask], xb[best_mask])
        if M is not None:
            mask = resid(M, xa, xb) < thr
            if mask.sum() >= best_count:
                best_M, best_mask = M, mask
    result = GeometryResult(best_M, best_mask)
    if model == "essential":
        result.R, result.t = recover_pose(best_M, xa[best_mask], xb[best_mask])
    return result


estimate_geometry = ransac


def corner_error(H_est: np.ndarray, H_gt: np.ndarray, width: int, height: int) -> float:
    """Mean distance between image corners warped by the estimated and true homographies."""
    corners = np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)
    return float(np.linalg.norm(apply_homography(H_est, corners) - apply_homography(H_gt, corners), axis=1).mean())


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    cos = (np.trace(R_est.T @ R_gt) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def translation_error_deg(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    """Angle between translation directions, sign-agnostic."""
    n = np.linalg.norm(t_est) * np.linalg.norm(t_gt)
    if n == 0:
        return 0.0 if np.linalg.norm(t_est) == np.linalg.norm(t_gt) else 180.0
    ang = float(np.degrees(np.arccos(np.clip(np.dot(t_est, t_gt) / n, -1.0, 1.0))))
    return min(ang, 180.0 - ang)


def pose_error_deg(R_est, t_est, R_gt, t_gt) -> float:
    """Max of rotation and translation-direction angular errors."""
    return max(rotation_error_deg(R_est, R_gt), translation_error_deg(t_est, t_gt))
