"""Feature providers, cosine-similarity and SSIM quality maps, partial-map assembly."""

from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from . import formats
from .geometry import DEFAULT_DEPTH_EPS, confidence_filter, resample_nearest, warp_to_query
from .scenekit import frame_pointmap
from .types import FeatureMap, Frame, QualityMap, WarpResult

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
# Fraction of lowest-confidence points dropped for estimated point maps.
FULL_SCALE_DROP_FRACTION = 0.2
# Exact synthetic point maps have uniform confidence; any drop would remove them all.
DEFAULT_DROP_FRACTION = 0.0


class FeatureProvider(Protocol):
    """Anything mapping a frame to a feature map, deterministically."""

    def __call__(self, frame: Frame) -> FeatureMap: ...


def _toy_stack(image: np.ndarray) -> np.ndarray:
    """Pre-projection toy channels: blurred RGB at three scales plus gray gradients."""
    img = np.asarray(image, dtype=np.float64) - 0.5
    chans = [ndimage.gaussian_filter(img, sigma=(s, s, 0), mode="nearest") for s in (0.75, 1.5, 3.0)]
    gray = ndimage.gaussian_filter(img.mean(axis=2), sigma=0.75, mode="nearest")
    gy, gx = np.gradient(gray)
    return np.concatenate(chans + [4.0 * gx[..., None], 4.0 * gy[..., None]], axis=2)


TOY_STACK_CHANNELS = 11


def _projection(dim: int, seed: int) -> np.ndarray:
    """Seeded (11, dim) matrix with orthonormal columns (dim <= 11) or rows (dim > 11)."""
    n = max(dim, TOY_STACK_CHANNELS)
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    return q[:TOY_STACK_CHANNELS, :dim]


def toy_features(image: np.ndarray, dim: int = 16, seed: int = 0) -> FeatureMap:
    """Deterministic stand-in for learned dense features, at full image resolution."""
    if dim < 4:
        raise ValueError(f"feature dim must be >= 4, got {dim}")
    return FeatureMap(_toy_stack(image) @ _projection(dim, seed), scale=1.0)


class ToyFeatureProvider:
    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, frame: Frame) -> FeatureMap:
        return toy_features(frame.image, self.dim, self.seed)

    def cache_key(self) -> str:
        return f"toy-d{self.dim}-s{self.seed}"


class FileFeatureProvider:
    """Serves precomputed features: the frame's attached map, else ``<directory>/<name>.bin``."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None

    def __call__(self, frame: Frame) -> FeatureMap:
        if frame.features is not None:
            return frame.features
        if self.directory is None:
            raise FileNotFoundError(f"no features attached to frame {frame.name!r}")
        data = formats.read_features(self.directory / f"{frame.name}.bin")
        return FeatureMap(data, scale=frame.shape[0] / data.shape[0])


class CachedProvider:
    """Memoizes another provider's output on disk, keyed by image content.

    The cache directory defaults to ``$PRIQA_CACHE``; without it, no caching.
    """

    def __init__(self, inner: Callable[[Frame], FeatureMap], directory=None):
        self.inner = inner
        directory = directory or os.environ.get("PRIQA_CACHE")
        self.directory = Path(directory) if directory else None

    def _key(self, frame: Frame) -> str:
        h = hashlib.sha256(np.ascontiguousarray(frame.image).tobytes())
        h.update(getattr(self.inner, "cache_key", lambda: type(self.inner).__name__)().encode())
        return h.hexdigest()[:32]

    def __call__(self, frame: Frame) -> FeatureMap:
        if self.directory is None:
            return self.inner(frame)
        path = self.directory / f"{self._key(frame)}.bin"
        if path.exists():
            data = formats.read_features(path)
            return FeatureMap(data, scale=frame.shape[0] / data.shape[0])
        fm = self.inner(frame)
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        formats.write_features(tmp, fm.data)
        os.replace(tmp, path)
        # serve what a later cache hit would return
        return FeatureMap(formats.read_features(path), scale=fm.scale)


def _cosine01(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    degenerate = (nu < ZERO_NORM) | (nv < ZERO_NORM)
    denom = np.where(degenerate, 1.0, nu * nv)
    cos = np.where(degenerate, 0.0, np.einsum("...d,...d->...", u, v) / denom)
    return np.clip(0.5 * (cos + 1.0), 0.0, 1.0)


def cosine_sim_map(f_query: FeatureMap, warped: WarpResult) -> QualityMap:
    """Per-pixel cosine similarity mapped to [0, 1]; valid where the warp is."""
    if f_query.shape != warped.shape or f_query.dim != warped.warped.shape[2]:
        raise ValueError(f"feature grids differ: {f_query.data.shape} vs {warped.warped.shape}")
    values = _cosine01(f_query.data, warped.warped)
    return QualityMap(np.where(warped.valid, values, 0.0), warped.valid)


def feature_similarity_map(f_a: FeatureMap, f_b: FeatureMap) -> QualityMap:
    """Dense cosine-similarity map between two pixel-aligned feature grids."""
    if f_a.data.shape != f_b.data.shape:
        raise ValueError(f"feature grids differ: {f_a.data.shape} vs {f_b.data.shape}")
    return QualityMap.dense(_cosine01(f_a.data, f_b.data))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_components(a: np.ndarray, b: np.ndarray, window: int, sigma: float) -> np.ndarray:
    k = gaussian_window(window, sigma)

    def filt(x):
        return ndimage.correlate(x, k, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> QualityMap:
    """Per-pixel SSIM of the channel-mean images, clamped to [0, 1]."""
    a, b = _check_pair(a, b)
    if window % 2 != 1:
        raise ValueError("window must be odd")
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    return QualityMap.dense(np.clip(_ssim_components(a, b, window, sigma), 0.0, 1.0))


def ssim_index(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Unclamped per-channel SSIM map, shape (H, W, C); the splatting-loss convention."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return np.stack([_ssim_components(a[..., c], b[..., c], window, sigma) for c in range(a.shape[2])], axis=-1)


def resize_quality_nearest(q: QualityMap, height: int, width: int) -> QualityMap:
    return QualityMap(resample_nearest(q.values, height, width), resample_nearest(q.valid, height, width))


def build_partial_map(
    query: Frame,
    reference: Frame,
    provider: FeatureProvider,
    drop_fraction: float = DEFAULT_DROP_FRACTION,
    depth_eps: float = DEFAULT_DEPTH_EPS,
) -> QualityMap:
    """Confidence-filter the reference geometry, warp its features, compare to the query."""
    pm = confidence_filter(frame_pointmap(reference), drop_fraction)
    f_ref = provider(reference)
    f_q = provider(query)
    warped = warp_to_query(f_ref, pm, query.camera, depth_eps=depth_eps)
    q = cosine_sim_map(f_q, warped)
    if not q.valid.any():
        log.warning("no geometric overlap between %r and %r", query.name, reference.name)
    if q.shape != query.shape:
        q = resize_quality_nearest(q, *query.shape)
    return q


def save_quality_map(q: QualityMap, path) -> tuple[Path, Path]:
    """16-bit value PNG at ``path`` plus a 1-bit validity PNG at ``<stem>.valid.png``."""
    path = Path(path)
    vpath = path.with_name(path.stem + ".valid.png")
    formats.write_gray16_png(path, q.values)
    formats.write_bitmask_png(vpath, q.valid)
    return path, vpath


def load_quality_map(path) -> QualityMap:
    path = Path(path)
    values = formats.read_gray16_png(path)
    vpath = path.with_name(path.stem + ".valid.png")
    valid = formats.read_bitmask_png(vpath) if vpath.exists() else np.ones(values.shape, dtype=bool)
    return QualityMap(values, valid)
