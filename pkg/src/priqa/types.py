"""Core data containers: cameras, frames, point maps, feature maps, quality maps.

Pixel convention used throughout: pixel ``(row, col)`` has its center at image
coordinates ``u = col``, ``v = row``.  Cameras map world points to camera
coordinates with ``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"invalid image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def world_to_camera(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, height: int, width: int) -> "Camera":
        """The same camera observed at a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return Camera(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            rotation=self.rotation,
            translation=self.translation,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class PointMap:
    """Per-pixel world coordinates with confidences in [0, 1]."""

    points: np.ndarray  # (H, W, 3)
    confidence: np.ndarray  # (H, W)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3 or conf.shape != pts.shape[:2]:
            raise ValueError(f"point map shapes inconsistent: {pts.shape} vs {conf.shape}")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidence must lie in [0, 1]")
        if not np.all(np.isfinite(pts[conf > 0])):
            raise ValueError("points must be finite where confidence > 0")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape


@dataclass(frozen=True)
class FeatureMap:
    """Per-pixel descriptor grid of shape (H', W', D)."""

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] < 1:
            raise ValueError(f"feature data must be (H, W, D) with D >= 1, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature entries must be finite")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class QualityMap:
    """Per-pixel quality in [0, 1] with a validity grid.

    Values where ``valid`` is false are zero-filled and carry no meaning.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2 or v.shape != m.shape:
            raise ValueError(f"quality map shapes inconsistent: {v.shape} vs {m.shape}")
        v = np.where(m, v, 0.0)
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("quality values must lie in [0, 1] on valid pixels")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @classmethod
    def dense(cls, values: np.ndarray) -> "QualityMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "QualityMap":
        return cls(np.zeros(shape), np.zeros(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class WarpResult:
    """Reference features splatted into the query view."""

    warped: np.ndarray  # (H, W, D)
    valid: np.ndarray  # (H, W) bool
    src_index: np.ndarray  # (H, W, 2) int, -1 where invalid
    depth: np.ndarray  # (H, W) winner depth in the query camera, inf where invalid

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True)
class Frame:
    """An RGB image in [0, 1] with its camera and optional geometry."""

    image: np.ndarray
    camera: Camera
    depth: np.ndarray | None = None
    pointmap: PointMap | None = None
    features: FeatureMap | None = None
    name: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {img.shape}")
        if np.any(img < 0) or np.any(img > 1):
            raise ValueError("image values must lie in [0, 1]")
        if img.shape[:2] != (self.camera.height, self.camera.width):
            raise ValueError(
                f"image size {img.shape[:2]} does not match camera "
                f"{(self.camera.height, self.camera.width)}"
            )
        object.__setattr__(self, "image", img)
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64)
            if d.shape != img.shape[:2]:
                raise ValueError(f"depth shape {d.shape} does not match image {img.shape[:2]}")
            object.__setattr__(self, "depth", d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable sequence of frames from one scene."""

    frames: tuple[Frame, ...]
    scene_id: str = "scene"
    splits: tuple[str, ...] = field(default=())

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if frames:
            shape = frames[0].shape
            for f in frames:
                if f.shape != shape:
                    raise ValueError("all frames in a dataset must share resolution")
        splits = tuple(self.splits) if self.splits else ("input",) * len(frames)
        if len(splits) != len(frames):
            raise ValueError("one split label per frame required")
        object.__setattr__(self, "splits", splits)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)
