"""Top-down fusion, local patch extraction and two-stage homography refinement.

Coordinates: index ``u`` of a map at scale ``1/s`` sits at pixel ``s * u``
of the original image (the receptive-field center of the strided convs).
A ``w x w`` patch at 1/2 scale therefore spans ``+-(w - 1)`` pixels around
its center, and resampling it at half-index steps gives a
``(2w - 1) x (2w - 1)`` grid at original-pixel spacing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import get_param
from .cascade import MatchSet
from .geometry import dlt_homography_batch
from .tensor import DTYPE, ConvSpec, bilinear_upsample2, conv2d, linear, row_softmax

DEFAULT_WINDOW = 5
FINE_TEMPERATURE = 0.05
SEARCH_RADIUS = 2
BATCH = 256


# --- fusion ----------------------------------------------------------------


def init_fpn_weights(low_channels, high_channels: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c2, c4, c8 = low_channels
    weights = {}
    for tag, c, coarse in (("l8", c8, high_channels), ("l4", c4, c8), ("l2", c2, c4)):
        weights[f"fpn.{tag}.lat"] = rng.normal(0, 1.0 / np.sqrt(c), (c, c)).astype(DTYPE)
        weights[f"fpn.{tag}.latb"] = np.zeros(c, DTYPE)
        weights[f"fpn.{tag}.up"] = rng.normal(0, 1.0 / np.sqrt(coarse), (c, coarse)).astype(DTYPE)
        weights[f"fpn.{tag}.out"] = rng.normal(0, 1.0 / np.sqrt(9 * c), (c, c, 3, 3)).astype(DTYPE)
        weights[f"fpn.{tag}.outb"] = np.zeros(c, DTYPE)
    return weights


def fuse_level(lateral: np.ndarray, coarser: np.ndarray, weights: dict, prefix: str) -> np.ndarray:
    """``conv3x3(lat1x1(lateral) + up2(proj1x1(coarser)))`` with edge-replicated borders."""
    c = lateral.shape[2]
    up = get_param(weights, f"{prefix}.up", (c, coarser.shape[2]))
    x = linear(lateral, weights[f"{prefix}.lat"], weights[f"{prefix}.latb"])
    x = x + bilinear_upsample2(linear(coarser, up))
    x = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return conv2d(x, ConvSpec(c, c, (3, 3), 1, 0), weights[f"{prefix}.out"], weights[f"{prefix}.outb"])


def fuse_to_half(f8: np.ndarray, low4: np.ndarray, low2: np.ndarray, weights: dict) -> np.ndarray:
    f4 = fuse_level(low4, f8, weights, "fpn.l4")
    return fuse_level(low2, f4, weights, "fpn.l2")


def fuse_pyramid(pyramid, f16: np.ndarray, weights: dict) -> tuple[np.ndarray, np.ndarray]:
    """Return the fused 1/8 map and the fused 1/2 map."""
    f8 = fuse_level(pyramid[8], f16, weights, "fpn.l8")
    return f8, fuse_to_half(f8, pyramid[4], pyramid[2], weights)


# --- patches ---------------------------------------------------------------


def extract_patches(map_half: np.ndarray, centers: np.ndarray, w: int = DEFAULT_WINDOW) -> np.ndarray:
    """Crop ``w x w`` windows around integer ``(x, y)`` centers; zeros outside the map."""
    if w % 2 == 0:
        raise ValueError("window size must be odd")
    r = w // 2
    padded = np.pad(map_half, ((r, r), (r, r), (0, 0)))
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 2)
    d = np.arange(w)
    ys = centers[:, 1, None, None] + d[None, :, None]
    xs = centers[:, 0, None, None] + d[None, None, :]
    inside = (ys >= 0) & (ys < padded.shape[0]) & (xs >= 0) & (xs < padded.shape[1])
    out = padded[np.clip(ys, 0, padded.shape[0] - 1), np.clip(xs, 0, padded.shape[1] - 1)]
    return np.where(inside[..., None], out, 0).astype(DTYPE)


def _half_steps(p: np.ndarray) -> np.ndarray:
    w = p.shape[-3]
    n = 2 * w - 1
    out = np.zeros(p.shape[:-3] + (n, n, p.shape[-1]), dtype=np.float64)
    out[..., 0::2, 0::2, :] = p
    out[..., 1::2, 0::2, :] = 0.5 * (p[..., :-1, :, :] + p[..., 1:, :, :])
    out[..., :, 1::2, :] = 0.5 * (out[..., :, 0:-1:2, :] + out[..., :, 2::2, :])
    return out


def upsample_patch(patch: np.ndarray) -> np.ndarray:
    """Resample a ``w x w`` patch at half-index steps -> ``(2w - 1) x (2w - 1)``.

    Blank (all-zero) samples, e.g. padding outside the map, carry no data:
    every interpolated cell that draws on one is blank as well, otherwise a
    half-weighted copy of its neighbour would tie with it under cosine
    similarity.
    """
    p = patch.astype(np.float64)
    out = _half_steps(p)
    filled = _half_steps(np.any(p != 0, axis=-1, keepdims=True).astype(np.float64))
    out = np.where(filled == 1.0, out, 0.0)
    return out.astype(DTYPE)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def patch_correlation(query: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Cosine similarity of one descriptor against every cell of a grid."""
    return _unit(grid) @ _unit(query)


def _pixel_peaks(grid_a: np.ndarray, grid_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched pixel stage on upsampled ``(n, N, N, C)`` grids -> offsets ``(n, 2)`` and maps."""
    n, size = grid_a.shape[:2]
    half = (size - 1) // 2
    ub = _unit(grid_b.astype(np.float64)).reshape(n, size * size, -1)
    corr = (ub @ _unit(grid_a[:, half, half].astype(np.float64))[:, :, None]).reshape(n, size, size)
    flat = corr.reshape(n, -1)
    idx = np.argmax(flat, axis=1)
    flat_map = np.all(flat == flat[:, :1], axis=1)
    y, x = np.divmod(idx, size)
    off = np.stack([x - half, y - half], axis=1).astype(np.int64)
    off[flat_map] = 0
    return off, corr


def pixel_refine(patch_a: np.ndarray, patch_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel offset of the A center's best match in B, and the correlation map.

    The offset is ``(dx, dy)`` relative to the B patch center. Ties go to the
    lowest raster index; a blank or flat correlation returns the center.
    """
    off, corr = _pixel_peaks(upsample_patch(patch_a)[None], upsample_patch(patch_b)[None])
    return off[0], corr[0]


@dataclass
class RefinedMatch:
    offset: np.ndarray  # sub-pixel (dx, dy) of the B endpoint from the B patch center, pixels
    pixel_offset: np.ndarray  # integer stage result
    H_patch: np.ndarray  # A-window coords -> B coords relative to pixel_offset
    fallback: bool = False


def _soft_argmax3(nb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expected ``(dx, dy)`` of ``(..., 3, 3)`` correlation neighbourhoods and their peak probability."""
    shape = nb.shape[:-2]
    p = row_softmax(nb.reshape(-1, 9) / FINE_TEMPERATURE).reshape(shape + (3, 3))
    d = np.array([-1.0, 0.0, 1.0])
    return p.sum(axis=-2) @ d, p.sum(axis=-1) @ d, p.max(axis=(-2, -1))


def _neighbourhoods(corr: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Gather ``corr[b, q, py-1:py+2, px-1:px+2]`` for ``corr`` of shape ``(n, m, N, N)``."""
    n, m, size, _ = corr.shape
    d = np.arange(-1, 2)
    ys = np.clip(py[..., None, None] + d[:, None], 0, size - 1)
    xs = np.clip(px[..., None, None] + d[None, :], 0, size - 1)
    b = np.arange(n)[:, None, None, None]
    q = np.arange(m)[None, :, None, None]
    return corr[b, q, ys, xs]


def _local_peaks(grid_a: np.ndarray, grid_b: np.ndarray, init: np.ndarray, radius: int):
    """Sub-pixel correspondences of interior A grid cells inside B, batched over matches.

    For each A cell the integer peak is searched within ``radius`` of its
    position shifted by ``init``; peaks on the edge of the (grid-clipped)
    search window are dropped because the true maximum may lie outside,
    and so are cells whose 3x3 neighbourhood touches blank padding.
    A 3x3 soft-argmax refines the peak. The same estimator applied to the
    A cell's own self-correlation gives its bias at zero shift, which is
    subtracted, so exact grid shifts are recovered exactly.

    Returns ``src, dst`` of shape ``(n, m, 2)`` in window coordinates
    relative to the center (``dst`` relative to ``init``), confidences
    ``(n, m)`` and a validity mask ``(n, m)``.
    """
    n, size = grid_a.shape[:2]
    half = (size - 1) // 2
    ua = _unit(grid_a.astype(np.float64))
    ub = _unit(grid_b.astype(np.float64))
    inner = np.arange(1, size - 1)
    qy, qx = [v.ravel() for v in np.meshgrid(inner, inner, indexing="ij")]
    m = len(qy)
    q = ua[:, qy, qx]  # (n, m, c)
    corr = (q @ np.swapaxes(ub.reshape(n, size * size, -1), 1, 2)).reshape(n, m, size, size)
    self_corr = (q @ np.swapaxes(ua.reshape(n, size * size, -1), 1, 2)).reshape(n, m, size, size)

    cy = qy[None, :] + init[:, 1:2]
    cx = qx[None, :] + init[:, 0:1]
    y0, y1 = np.maximum(cy - radius, 0), np.minimum(cy + radius, size - 1)
    x0, x1 = np.maximum(cx - radius, 0), np.minimum(cx + radius, size - 1)
    grid = np.arange(size)
    inside_y = (grid >= y0[..., None]) & (grid <= y1[..., None])  # (n, m, N)
    inside_x = (grid >= x0[..., None]) & (grid <= x1[..., None])
    window = inside_y[..., :, None] & inside_x[..., None, :]
    masked = np.where(window, corr, -np.inf).reshape(n, m, -1)
    py, px = np.divmod(np.argmax(masked, axis=2), size)

    valid = (y1 - y0 >= 2) & (x1 - x0 >= 2) & q.any(axis=2)
    valid &= (py != y0) & (py != y1) & (px != x0) & (px != x1)
    # a blank (padding) cell in either 3x3 neighbourhood would bias the soft-argmax
    blank_a = np.broadcast_to(~ua.any(axis=3)[:, None], (n, m, size, size))
    blank_b = np.broadcast_to(~ub.any(axis=3)[:, None], (n, m, size, size))
    valid &= ~_neighbourhoods(blank_b, py, px).any(axis=(2, 3))
    sx, sy, conf = _soft_argmax3(_neighbourhoods(corr, py, px))
    qyy = np.broadcast_to(qy, (n, m))
    qxx = np.broadcast_to(qx, (n, m))
    bx, by, _ = _soft_argmax3(_neighbourhoods(self_corr, qyy, qxx))
    valid &= ~_neighbourhoods(blank_a, qyy, qxx).any(axis=(2, 3))
    src = np.stack([qxx - half, qyy - half], axis=2).astype(np.float64)
    dst = np.stack([px + sx - bx - half - init[:, 0:1], py + sy - by - half - init[:, 1:2]], axis=2)
    return src, dst, conf, valid


def _valid_patch_homographies(H: np.ndarray, ok: np.ndarray, half: int) -> np.ndarray:
    """Finite, invertible, and positive denominator at all four window corners."""
    corners = np.array([[-half, -half, 1], [half, -half, 1], [-half, half, 1], [half, half, 1]], float)
    den = H[:, 2, :] @ corners.T
    with np.errstate(invalid="ignore"):
        det = np.abs(np.linalg.det(np.where(ok[:, None, None], H, np.eye(3))))
    return ok & np.all(den > 0, axis=1) & (det > 1e-12)


def _fit_patches(src, dst, conf, valid, half: int) -> tuple[np.ndarray, np.ndarray]:
    """Weighted DLT per match; invalid fits fall back to the center cell's translation."""
    H, ok = dlt_homography_batch(src, dst, np.where(valid, conf, 0.0))
    ok = _valid_patch_homographies(H, ok, half)
    center = valid & np.all(src == 0, axis=2)
    shift = np.where(center.any(axis=1)[:, None], (dst * center[..., None]).sum(axis=1), 0.0)
    T = np.tile(np.eye(3), (len(H), 1, 1))
    T[:, :2, 2] = shift
    return np.where(ok[:, None, None], H, T), ~ok


def _refine_batch(patch_a: np.ndarray, patch_b: np.ndarray):
    """Both stages for ``(n, w, w, C)`` patch pairs."""
    half = patch_a.shape[1] - 1
    grid_a, grid_b = upsample_patch(patch_a), upsample_patch(patch_b)
    init, corr = _pixel_peaks(grid_a, grid_b)
    src, dst, conf, valid = _local_peaks(grid_a, grid_b, init, SEARCH_RADIUS)
    hs, fb = _fit_patches(src, dst, conf, valid, half)
    offsets = np.clip(init + hs[:, :2, 2] / hs[:, 2, 2:3], -half, half)
    return init, corr, offsets, hs, fb


def subpixel_refine(patch_a: np.ndarray, patch_b: np.ndarray, init: np.ndarray) -> RefinedMatch:
    """Fit a patch homography to local correspondences and warp the A center through it."""
    half = patch_a.shape[0] - 1
    init = np.asarray(init, dtype=np.int64).reshape(1, 2)
    grid_a, grid_b = upsample_patch(patch_a)[None], upsample_patch(patch_b)[None]
    src, dst, conf, valid = _local_peaks(grid_a, grid_b, init, SEARCH_RADIUS)
    hs, fb = _fit_patches(src, dst, conf, valid, half)
    offset = np.clip(init[0] + hs[0, :2, 2] / hs[0, 2, 2], -half, half)
    return RefinedMatch(offset, init[0], hs[0], bool(fb[0]))


@dataclass
class RefinedMatches:
    points_a: np.ndarray  # (n, 2) pixels
    positions: np.ndarray  # (n, 2) refined B pixels
    pixel_positions: np.ndarray  # (n, 2) integer-stage B pixels
    homographies: np.ndarray  # (n, 3, 3)
    correlations: np.ndarray  # (n, 2w-1, 2w-1) pixel-stage cosine maps
    centers_b: np.ndarray  # (n, 2) B patch centers, pixels
    fallback: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.positions)


def refine_matches(
    half_a: np.ndarray,
    half_b: np.ndarray,
    matches: MatchSet,
    grid_a: tuple[int, int],
    grid_b: tuple[int, int],
    w: int = DEFAULT_WINDOW,
) -> RefinedMatches:
    """Refine every coarse match; output order follows ``matches``."""
    ya, xa = np.divmod(matches.ia, grid_a[1])
    yb, xb = np.divmod(matches.ib, grid_b[1])
    ca = np.stack([xa, ya], axis=1) * 4  # 1/8 -> 1/2 index
    cb = np.stack([xb, yb], axis=1) * 4
    pa = extract_patches(half_a, ca, w)
    pb = extract_patches(half_b, cb, w)
    n = len(matches)
    size = 2 * w - 1
    pos = np.zeros((n, 2))
    pix = np.zeros((n, 2))
    hs = np.zeros((n, 3, 3))
    corrs = np.zeros((n, size, size), DTYPE)
    fb = np.zeros(n, bool)
    for b0 in range(0, n, BATCH):
        sl = slice(b0, b0 + BATCH)
        init, corr, off, h, f = _refine_batch(pa[sl], pb[sl])
        center_b = 2.0 * cb[sl]
        pos[sl] = center_b + off
        pix[sl] = center_b + init
        hs[sl], corrs[sl], fb[sl] = h, corr, f
    return RefinedMatches(2.0 * ca, pos, pix, hs, corrs, 2.0 * cb, fb)
