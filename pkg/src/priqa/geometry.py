"""Projection, z-buffered warping, confidence filtering and camera noise."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .types import Camera, FeatureMap, PointMap, WarpResult

DEFAULT_DEPTH_EPS = 1e-3
# Winners deeper than (1 + margin) x their 3x3 neighbourhood minimum are background
# showing through a splat hole in a nearer surface.
DEFAULT_BLEED_MARGIN = 0.1
_MIN_DEPTH = 1e-9


def project(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into ``camera``.

    Returns ``(pixels, depth, ok)`` where ``pixels`` is (N, 2) in ``(u, v)``
    order, ``depth`` is the camera-space z and ``ok`` flags points strictly in
    front of the camera.  Pixels of points with ``ok == False`` are NaN.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    ok = z > _MIN_DEPTH
    safe_z = np.where(ok, z, 1.0)
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    pix = np.stack([u, v], axis=1)
    pix[~ok] = np.nan
    return pix, z, ok


def unproject(pixels: np.ndarray, depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Inverse of :func:`project` for z-depth: (N, 2) pixels + (N,) depth -> (N, 3) world."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (pix[:, 0] - camera.cx) / camera.fx * z
    y = (pix[:, 1] - camera.cy) / camera.fy * z
    cam = np.stack([x, y, z], axis=1)
    return (cam - camera.translation) @ camera.rotation


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H*W, 2) pixel centers in (u, v) order, row-major."""
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def resample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of an (H, W, ...) grid by pixel-center mapping."""
    h, w = grid.shape[:2]
    if (h, w) == (height, width):
        return grid
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
    return grid[rows[:, None], cols[None, :]]


def warp_to_query(
    features_ref: FeatureMap,
    pointmap_ref: PointMap,
    camera_query: Camera,
    min_conf_keep: float = 1e-6,
    depth_eps: float = DEFAULT_DEPTH_EPS,
    bleed_margin: float | None = DEFAULT_BLEED_MARGIN,
) -> WarpResult:
    """Forward-splat reference features into the query view with a z-buffer.

    Every reference pixel with confidence >= ``min_conf_keep`` is projected to
    the nearest query pixel.  Per query pixel the nearest depth wins; depths
    within ``depth_eps`` (relative) of the minimum are ties, resolved by the
    lowest ``(row, col)`` source index.

    Nearest-pixel splats leave holes where the query magnifies a surface; a
    farther surface can win such a pixel although it is occluded.  With
    ``bleed_margin`` set, winners deeper than ``(1 + bleed_margin)`` times the
    smallest winner depth in their 3x3 neighbourhood are marked invalid.
    ``None`` disables the filter.
    """
    if not 0 < min_conf_keep <= 1:
        raise ValueError(f"min_conf_keep must lie in (0, 1], got {min_conf_keep}")
    h, w = features_ref.shape
    pts = resample_nearest(pointmap_ref.points, h, w)
    conf = resample_nearest(pointmap_ref.confidence, h, w)
    if pts.shape[:2] != (h, w):
        raise ValueError("point map and features disagree after resampling")
    cam = camera_query if (camera_query.height, camera_query.width) == (h, w) else camera_query.scaled(h, w)

    keep = conf.ravel() >= min_conf_keep
    src = np.flatnonzero(keep)
    pix, z, ok = project(pts.reshape(-1, 3)[src], cam)
    col = np.floor(pix[:, 0] + 0.5)
    row = np.floor(pix[:, 1] + 0.5)
    inside = ok & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    src, z = src[inside], z[inside]
    tgt = row[inside].astype(np.int64) * w + col[inside].astype(np.int64)

    n = h * w
    zmin = np.full(n, np.inf)
    np.minimum.at(zmin, tgt, z)
    contender = z <= zmin[tgt] * (1.0 + depth_eps)
    winner = np.full(n, np.iinfo(np.int64).max)
    np.minimum.at(winner, tgt[contender], src[contender])

    valid = winner < np.iinfo(np.int64).max
    win_src = np.where(valid, winner, 0)
    warped = features_ref.data.reshape(n, -1)[win_src].copy()
    warped[~valid] = 0.0

    # depth of the winning point, not the per-pixel minimum
    # src is ascending and unique, so searchsorted finds each winner exactly
    depth = np.full(n, np.inf)
    depth[valid] = z[np.searchsorted(src, win_src[valid])]
    if bleed_margin is not None:
        grid = depth.reshape(h, w)
        nbr = ndimage.minimum_filter(grid, size=3, mode="constant", cval=np.inf)
        bleed = (grid > nbr * (1.0 + bleed_margin)).ravel() & valid
        valid &= ~bleed
        winner[bleed] = np.iinfo(np.int64).max
        warped[bleed] = 0.0
        depth[bleed] = np.inf

    src_index = np.full((n, 2), -1, dtype=np.int64)
    src_index[valid, 0] = winner[valid] // w
    src_index[valid, 1] = winner[valid] % w
    return WarpResult(
        warped=warped.reshape(h, w, -1),
        valid=valid.reshape(h, w),
        src_index=src_index.reshape(h, w, 2),
        depth=depth.reshape(h, w),
    )


def confidence_filter(pointmap: PointMap, drop_fraction: float) -> PointMap:
    """Zero the confidence of the lowest ``drop_fraction`` quantile.

    The threshold is the linearly interpolated quantile of all confidences;
    points at or below it are dropped, so ties at the threshold go too.
    """
    if not 0 <= drop_fraction < 1:
        raise ValueError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    if drop_fraction == 0:
        return pointmap
    conf = pointmap.confidence
    thresh = np.quantile(conf, drop_fraction, method="linear")
    out = np.where(conf <= thresh, 0.0, conf)
    return PointMap(pointmap.points, out)


def perturb_camera(camera: Camera, level: float, seed: int) -> Camera:
    """Seeded gaussian noise on pose and intrinsics.

    Rotation: angle ~ N(0, (100*level) deg) about a uniform random axis.
    Translation: per-axis N(0, level*|t|).  Focal lengths: relative N(0, level).
    Principal point: N(0, level*dimension), clipped to the image.
    """
    if level < 0:
        raise ValueError("level must be non-negative")
    if level == 0:
        return camera
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.normal(0.0, 100.0 * level))
    dR = Rotation.from_rotvec(axis * angle).as_matrix()
    t_scale = level * np.linalg.norm(camera.translation)
    t = camera.translation + rng.normal(0.0, 1.0, size=3) * t_scale
    fx = camera.fx * abs(1.0 + rng.normal(0.0, level))
    fy = camera.fy * abs(1.0 + rng.normal(0.0, level))
    cx = camera.cx + rng.normal(0.0, level * camera.width)
    cy = camera.cy + rng.normal(0.0, level * camera.height)
    return Camera(
        fx=max(fx, 1e-6),
        fy=max(fy, 1e-6),
        cx=float(np.clip(cx, 0.0, np.nextafter(camera.width, 0))),
        cy=float(np.clip(cy, 0.0, np.nextafter(camera.height, 0))),
        rotation=dR @ camera.rotation,
        translation=t,
        width=camera.width,
        height=camera.height,
    )


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(R_a @ R_b.T) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(c, -1.0, 1.0))))
