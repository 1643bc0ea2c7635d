"""Binary and PNG file formats.

Binary grids are little-endian.  Each starts with an 8-byte magic followed by
``u32`` dimensions and row-major float32 payload:

* depth:    ``PRQDEPTH`` H W, then H*W float32 (16-byte header)
* features: ``PRQFEAT\\0`` H W D, then H*W*D float32 (20-byte header)
* pointmap: ``PRQPMAP\\0`` H W, then H*W*4 float32 (x, y, z, confidence)
* warp:     a features file followed by H*W validity bytes (0 or 1)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

DEPTH_MAGIC = b"PRQDEPTH"
FEAT_MAGIC = b"PRQFEAT\x00"
PMAP_MAGIC = b"PRQPMAP\x00"

PNG_COMPRESS_LEVEL = 6


def _read_header(buf: bytes, magic: bytes, ndims: int, path) -> tuple[tuple[int, ...], int]:
    size = len(magic) + 4 * ndims
    if len(buf) < size or buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    dims = struct.unpack("<" + "I" * ndims, buf[len(magic) : size])
    return dims, size


def _payload(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    need = offset + 4 * count
    if len(buf) < need:
        raise FormatError(f"{path}: truncated payload ({len(buf)} < {need} bytes)")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset)


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (h, w), off = _read_header(buf, DEPTH_MAGIC, 2, path)
    return _payload(buf, off, h * w, path).reshape(h, w).astype(np.float64)


def _feature_bytes(data: np.ndarray) -> bytes:
    h, w, d = data.shape
    return FEAT_MAGIC + struct.pack("<III", h, w, d) + np.ascontiguousarray(data, dtype="<f4").tobytes()


def write_features(path, data: np.ndarray) -> None:
    Path(path).write_bytes(_feature_bytes(np.asarray(data)))


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (h, w, d), off = _read_header(buf, FEAT_MAGIC, 3, path)
    return _payload(buf, off, h * w * d, path).reshape(h, w, d).astype(np.float64)


def write_pointmap(path, points: np.ndarray, confidence: np.ndarray) -> None:
    h, w = confidence.shape
    packed = np.concatenate([points, confidence[..., None]], axis=2)
    with open(path, "wb") as fh:
        fh.write(PMAP_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(packed, dtype="<f4").tobytes())


def read_pointmap(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    (h, w), off = _read_header(buf, PMAP_MAGIC, 2, path)
    packed = _payload(buf, off, h * w * 4, path).reshape(h, w, 4).astype(np.float64)
    return packed[..., :3], packed[..., 3]


def write_warp(path, warped: np.ndarray, valid: np.ndarray) -> None:
    body = _feature_bytes(np.where(valid[..., None], warped, 0.0))
    Path(path).write_bytes(body + np.asarray(valid, dtype=np.uint8).tobytes())


def read_warp(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    (h, w, d), off = _read_header(buf, FEAT_MAGIC, 3, path)
    data = _payload(buf, off, h * w * d, path).reshape(h, w, d).astype(np.float64)
    start = off + 4 * h * w * d
    if len(buf) < start + h * w:
        raise FormatError(f"{path}: missing validity plane")
    valid = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=start).reshape(h, w).astype(bool)
    return data, valid


# -- PNG ---------------------------------------------------------------------


def _save_png(img: Image.Image, path) -> None:
    # Encode to memory first so a failed encode never leaves a partial file.
    bio = io.BytesIO()
    img.save(bio, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
    Path(path).write_bytes(bio.getvalue())


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-even."""
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_uint16(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_rgb_png(path, image: np.ndarray) -> None:
    _save_png(Image.fromarray(to_uint8(image)), path)


def read_rgb_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    return arr / 255.0


def write_gray8_png(path, values: np.ndarray) -> None:
    _save_png(Image.fromarray(to_uint8(values)), path)


def read_gray8_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray16_png(path, values: np.ndarray) -> None:
    arr = to_uint16(values)
    _save_png(Image.fromarray(arr), path)


def read_gray16_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0


def write_bitmask_png(path, mask: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(mask, dtype=bool))
    _save_png(img.convert("1"), path)


def read_bitmask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0
