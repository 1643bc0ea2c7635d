"""Synthetic multi-view scenes, dataset IO and seeded image corruptions.

Scenes are built from textured planes so that depth, visibility and
cross-view correspondence are all available in closed form.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats
from .errors import FormatError, StateError
from .geometry import pixel_grid, unproject
from .types import Camera, Dataset, FeatureMap, Frame, PointMap

PLANE_DEPTH = 4.0
NEAR_PLANE_DEPTH = 2.5
NEAR_PLANE_HALF_EXTENT = 0.45
FOCAL_RATIO = 0.9
TEXTURE_EXTENT = 4.0


@dataclass(frozen=True)
class Plane:
    """Axis-aligned plane ``z = depth`` with an optional rectangular extent."""

    depth: float
    texture_seed: int
    texture_cells: int
    half_extent: float | None = None

    def texture(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return plane_texture(a, b, self.texture_seed, self.texture_cells)


def plane_texture(a: np.ndarray, b: np.ndarray, seed: int, cells: int) -> np.ndarray:
    """Smooth checkerboard plus band-limited noise, evaluated at plane coordinates.

    Edges are soft so that bilinear resampling of a render stays close to the
    analytic texture.
    """
    rng = np.random.default_rng(seed)
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    cell = TEXTURE_EXTENT / cells
    s = np.sin(np.pi * (a + 0.37) / cell) * np.sin(np.pi * (b - 0.21) / cell)
    mix = 0.5 + 0.5 * np.tanh(2.5 * s)
    out = c0 + (c1 - c0) * mix[..., None]
    for _ in range(6):
        k = rng.uniform(0.4, 1.6, size=2) * np.pi / cell
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(-0.08, 0.08, size=3)
        out = out + amp * np.sin(k[0] * a + k[1] * b + phase)[..., None]
    return np.clip(out, 0.0, 1.0)


def look_at_camera(center, target, height: int, width: int, focal_ratio: float = FOCAL_RATIO) -> Camera:
    center = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - center
    f /= np.linalg.norm(f)
    x = np.cross([0.0, 1.0, 0.0], f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return Camera(
        fx=focal_ratio * width,
        fy=focal_ratio * width,
        cx=(width - 1) / 2,
        cy=(height - 1) / 2,
        rotation=R,
        translation=-R @ center,
        width=width,
        height=height,
    )


def arc_cameras(n_views: int, resolution: tuple[int, int], arc_degrees: float, distance: float) -> list[Camera]:
    """Cameras on a horizontal arc of radius ``distance`` looking at (0, 0, distance)."""
    h, w = resolution
    target = np.array([0.0, 0.0, distance])
    cams = []
    for theta in np.deg2rad(np.linspace(-arc_degrees / 2, arc_degrees / 2, n_views)):
        c = target + distance * np.array([np.sin(theta), 0.0, -np.cos(theta)])
        cams.append(look_at_camera(c, target, h, w))
    return cams


def trace_planes(planes: list[Plane], camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast pixel centers against ``planes``.

    Returns ``(depth, plane_index, hit_points)``; ``plane_index`` is -1 on a miss.
    """
    h, w = camera.height, camera.width
    pix = pixel_grid(h, w)
    rays = unproject(pix, np.ones(len(pix)), camera) - camera.center  # z_cam = 1 along each ray
    depth = np.full(len(pix), np.inf)
    label = np.full(len(pix), -1)
    points = np.zeros((len(pix), 3))
    for k, plane in enumerate(planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (plane.depth - camera.center[2]) / rays[:, 2]
        hit = camera.center + s[:, None] * rays
        ok = np.isfinite(s) & (s > 0)
        if plane.half_extent is not None:
            ok &= (np.abs(hit[:, 0]) <= plane.half_extent) & (np.abs(hit[:, 1]) <= plane.half_extent)
        closer = ok & (s < depth)
        depth[closer] = s[closer]
        label[closer] = k
        points[closer] = hit[closer]
    return depth.reshape(h, w), label.reshape(h, w), points.reshape(h, w, 3)


def render_planes(planes: list[Plane], camera: Camera, name: str = "") -> Frame:
    depth, label, pts = trace_planes(planes, camera)
    if np.any(label < 0):
        raise ValueError("camera sees past the scene; every pixel must hit a plane")
    image = np.zeros(depth.shape + (3,))
    for k, plane in enumerate(planes):
        sel = label == k
        image[sel] = plane.texture(pts[sel][:, 0], pts[sel][:, 1])
    return Frame(image=image, camera=camera, depth=depth, name=name)


def _check_args(n_views: int, resolution) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in resolution)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"resolution must be (H, W), got {resolution!r}") from exc
    if h < 16 or w < 16:
        raise ValueError(f"resolution must be at least 16x16, got {h}x{w}")
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    return h, w


def planar_scene(seed: int, texture_cells: int = 8) -> list[Plane]:
    return [Plane(PLANE_DEPTH, texture_seed=seed, texture_cells=texture_cells)]


def two_plane_scene(seed: int, texture_cells: int = 8) -> list[Plane]:
    return [
        Plane(PLANE_DEPTH, texture_seed=seed, texture_cells=texture_cells),
        Plane(NEAR_PLANE_DEPTH, texture_seed=seed + 7919, texture_cells=max(2, texture_cells // 2),
              half_extent=NEAR_PLANE_HALF_EXTENT),
    ]


def generate_planar_scene(
    seed: int,
    n_views: int,
    resolution: tuple[int, int] = (64, 64),
    texture_cells: int = 8,
    arc_degrees: float = 30.0,
) -> Dataset:
    """A textured plane seen from ``n_views`` cameras on an arc, with exact depth."""
    h, w = _check_args(n_views, resolution)
    planes = planar_scene(seed, texture_cells)
    cams = arc_cameras(n_views, (h, w), arc_degrees, PLANE_DEPTH)
    frames = [render_planes(planes, c, name=f"{i:04d}") for i, c in enumerate(cams)]
    return Dataset(frames, scene_id=f"planar-{seed}")


def generate_two_plane_scene(
    seed: int,
    n_views: int,
    resolution: tuple[int, int] = (64, 64),
    texture_cells: int = 8,
    arc_degrees: float = 30.0,
) -> Dataset:
    """A small near square floating in front of a background plane (exercises occlusion)."""
    h, w = _check_args(n_views, resolution)
    planes = two_plane_scene(seed, texture_cells)
    cams = arc_cameras(n_views, (h, w), arc_degrees, PLANE_DEPTH)
    frames = [render_planes(planes, c, name=f"{i:04d}") for i, c in enumerate(cams)]
    return Dataset(frames, scene_id=f"twoplane-{seed}")


def pointmap_from_depth(frame: Frame) -> PointMap:
    """World coordinates of every pixel from z-depth; confidence 1 where depth is valid."""
    if frame.depth is None:
        raise StateError(f"frame {frame.name!r} has no depth")
    h, w = frame.shape
    d = frame.depth.ravel()
    ok = np.isfinite(d) & (d > 0)
    pts = unproject(pixel_grid(h, w), np.where(ok, d, 1.0), frame.camera)
    pts[~ok] = 0.0
    return PointMap(pts.reshape(h, w, 3), ok.reshape(h, w).astype(np.float64))


def frame_pointmap(frame: Frame) -> PointMap:
    return frame.pointmap if frame.pointmap is not None else pointmap_from_depth(frame)


# -- dataset IO ---------------------------------------------------------------


def camera_to_json(cam: Camera) -> dict:
    return {
        "fx": float(cam.fx),
        "fy": float(cam.fy),
        "cx": float(cam.cx),
        "cy": float(cam.cy),
        "width": cam.width,
        "height": cam.height,
        "R": [float(v) for v in cam.rotation.ravel()],
        "t": [float(v) for v in cam.translation],
    }


def camera_from_json(d: dict, path="<camera>") -> Camera:
    try:
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64).reshape(3),
            width=int(d["width"]),
            height=int(d["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid camera ({exc})") from exc


def export_dataset(dataset: Dataset, root) -> Path:
    """Write ``dataset`` in the on-disk layout read by :func:`load_dataset`.

    Images are quantized to 8 bits; depth, point maps and features are float32.
    """
    root = Path(root)
    for sub in ("frames", "cameras"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(dataset.frames):
        name = f.name or f"{i:04d}"
        names.append(name)
        formats.write_rgb_png(root / "frames" / f"{name}.png", f.image)
        (root / "cameras" / f"{name}.json").write_text(json.dumps(camera_to_json(f.camera), indent=2) + "\n")
        if f.depth is not None:
            (root / "depth").mkdir(exist_ok=True)
            formats.write_depth(root / "depth" / f"{name}.bin", f.depth)
        if f.pointmap is not None:
            (root / "pointmaps").mkdir(exist_ok=True)
            formats.write_pointmap(root / "pointmaps" / f"{name}.bin", f.pointmap.points, f.pointmap.confidence)
        if f.features is not None:
            (root / "features").mkdir(exist_ok=True)
            formats.write_features(root / "features" / f"{name}.bin", f.features.data)
    meta = {"scene_id": dataset.scene_id, "frames": names, "splits": list(dataset.splits)}
    (root / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root


def load_dataset(path) -> Dataset:
    """Read a dataset directory (frames/, cameras/, optional depth/, pointmaps/, features/)."""
    root = Path(path)
    frame_dir = root / "frames"
    if not frame_dir.is_dir():
        raise FormatError(f"{root}: missing frames/ directory")
    meta_path = root / "scene.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    names = meta.get("frames") or sorted(p.stem for p in frame_dir.glob("*.png"))
    if len(set(names)) != len(names):
        raise FormatError(f"{root}: duplicate frame names")
    frames = []
    for name in names:
        cam_path = root / "cameras" / f"{name}.json"
        if not cam_path.exists():
            raise FormatError(f"{cam_path}: missing camera file")
        try:
            cam_json = json.loads(cam_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{cam_path}: {exc}") from exc
        cam = camera_from_json(cam_json, cam_path)
        image = formats.read_rgb_png(frame_dir / f"{name}.png")
        if image.shape[:2] != (cam.height, cam.width):
            raise FormatError(f"{name}: image {image.shape[:2]} does not match camera {(cam.height, cam.width)}")
        depth = pointmap = features = None
        if (p := root / "depth" / f"{name}.bin").exists():
            depth = formats.read_depth(p)
            if depth.shape != image.shape[:2]:
                raise FormatError(f"{p}: depth shape {depth.shape} does not match image")
        if (p := root / "pointmaps" / f"{name}.bin").exists():
            pointmap = PointMap(*formats.read_pointmap(p))
        if (p := root / "features" / f"{name}.bin").exists():
            data = formats.read_features(p)
            features = FeatureMap(data, scale=image.shape[0] / data.shape[0])
        frames.append(Frame(image, cam, depth=depth, pointmap=pointmap, features=features, name=name))
    if not frames:
        raise FormatError(f"{root}: no frames")
    splits = meta.get("splits") or ()
    try:
        return Dataset(frames, scene_id=meta.get("scene_id", root.name), splits=splits)
    except ValueError as exc:
        raise FormatError(f"{root}: {exc}") from exc


def quantize_8bit(dataset: Dataset) -> Dataset:
    """The dataset as it reads back after an 8-bit image export."""
    frames = [
        Frame(formats.to_uint8(f.image) / 255.0, f.camera, f.depth, f.pointmap, f.features, f.name)
        for f in dataset.frames
    ]
    return Dataset(frames, dataset.scene_id, dataset.splits)


# -- corruptions ---------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionRecipe:
    """Intensities in [0, 1] for each corruption family.

    Each family except ``shuffle`` acts inside a random soft blob; ``shuffle``
    cyclically permutes ``n_patches`` grid-aligned square patches.
    """

    noise: float = 0.0
    blur: float = 0.0
    warp: float = 0.0
    shuffle: float = 0.0
    color: float = 0.0
    patch_size: int = 8
    n_patches: int = 4
    recipe_id: str = ""

    def __post_init__(self):
        for name in ("noise", "blur", "warp", "shuffle", "color"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} intensity must lie in [0, 1], got {v}")
        if self.shuffle > 0 and self.n_patches < 2:
            raise ValueError("patch shuffle needs at least 2 patches")

    def to_json(self) -> dict:
        return asdict(self)


DEFAULT_RECIPES = (
    CorruptionRecipe(noise=0.6, blur=0.5, recipe_id="noise-blur"),
    CorruptionRecipe(warp=0.8, color=0.4, recipe_id="warp-color"),
    CorruptionRecipe(shuffle=1.0, blur=0.3, n_patches=4, recipe_id="shuffle-blur"),
    CorruptionRecipe(noise=0.3, warp=0.5, shuffle=0.8, color=0.3, recipe_id="mixed"),
)


@dataclass(frozen=True)
class CorruptedFrame:
    frame: Frame
    intensity: np.ndarray  # (H, W) in [0, 1]
    shuffled: np.ndarray  # (H, W) bool, pixels whose content came from another patch


def _blob(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    r = rng.uniform(0.15, 0.35) * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))


def corrupt_frame(frame: Frame, recipe: CorruptionRecipe, seed: int) -> CorruptedFrame:
    """Apply seeded localized corruptions and record per-pixel intensity."""
    rng = np.random.default_rng(seed)
    img = frame.image.copy()
    h, w = frame.shape
    parts = []
    shuffled = np.zeros((h, w), dtype=bool)

    if recipe.warp > 0:
        wt = _blob(rng, h, w)
        A = rng.normal(0, 0.25 * recipe.warp, size=(2, 2))
        b = rng.normal(0, 3.0 * recipe.warp, size=2)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy = wt * (A[0, 0] * (yy - h / 2) + A[0, 1] * (xx - w / 2) + b[0])
        dx = wt * (A[1, 0] * (yy - h / 2) + A[1, 1] * (xx - w / 2) + b[1])
        coords = np.stack([yy + dy, xx + dx])
        img = np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(3)], -1)
        parts.append(recipe.warp * wt)

    if recipe.shuffle > 0:
        p = recipe.patch_size
        gh, gw = h // p, w // p
        if gh * gw < recipe.n_patches:
            raise ValueError(f"image too small for {recipe.n_patches} patches of size {p}")
        cells = rng.choice(gh * gw, size=recipe.n_patches, replace=False)
        src = img.copy()
        for i, cell in enumerate(cells):
            nxt = cells[(i + 1) % len(cells)]
            r0, c0 = divmod(int(cell), gw)
            r1, c1 = divmod(int(nxt), gw)
            img[r0 * p:(r0 + 1) * p, c0 * p:(c0 + 1) * p] = src[r1 * p:(r1 + 1) * p, c1 * p:(c1 + 1) * p]
            shuffled[r0 * p:(r0 + 1) * p, c0 * p:(c0 + 1) * p] = True
        parts.append(recipe.shuffle * shuffled)

    if recipe.blur > 0:
        wt = _blob(rng, h, w)
        sigma = 0.5 + 3.0 * recipe.blur
        blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
        img = img * (1 - wt[..., None]) + blurred * wt[..., None]
        parts.append(recipe.blur * wt)

    if recipe.color > 0:
        wt = _blob(rng, h, w)
        offset = rng.uniform(-1, 1, size=3) * 0.35 * recipe.color
        img = img + offset * wt[..., None]
        parts.append(recipe.color * wt)

    if recipe.noise > 0:
        wt = _blob(rng, h, w)
        img = img + rng.normal(0, 0.3 * recipe.noise, size=img.shape) * wt[..., None]
        parts.append(recipe.noise * wt)

    img = np.clip(img, 0.0, 1.0)
    keep = np.ones((h, w))
    for part in parts:
        keep *= 1.0 - part
    out = Frame(img, frame.camera, frame.depth, frame.pointmap, None, frame.name)
    return CorruptedFrame(out, 1.0 - keep, shuffled)
