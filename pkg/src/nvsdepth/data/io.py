"""Raster and camera file formats: PFM, PPM, PGM, 16-bit PNG depth, text poses."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, IngestionError
from ..geometry import CameraIntrinsics, DepthMap, RigidPose

PNG_DEPTH_SCALE = 256.0


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(path, "file not found")
    return path.read_bytes()


def _netpbm_header(data: bytes, count: int, path):
    """Parse ``count`` whitespace-separated header tokens (``#`` comments allowed)."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise IngestionError(path, "malformed header")
        tokens.append(m.group(2))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise IngestionError(path, "malformed header")
    return tokens, pos + 1


# --- PFM (float depth) -------------------------------------------------------

def write_pfm(path, depth: DepthMap | np.ndarray) -> None:
    """Grayscale little-endian PFM; invalid pixels are stored as NaN."""
    if isinstance(depth, DepthMap):
        arr = np.where(depth.valid, depth.values, np.nan)
    else:
        arr = np.asarray(depth)
    arr = np.asarray(arr, dtype="<f4")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(arr).tobytes())


def read_pfm_array(path) -> np.ndarray:
    data = _read_bytes(path)
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0].strip() not in (b"Pf", b"PF"):
        raise IngestionError(path, "not a PFM file")
    if lines[0].strip() == b"PF":
        raise IngestionError(path, "colour PFM not supported for depth")
    try:
        w, h = (int(t) for t in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise IngestionError(path, "malformed PFM header") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise IngestionError(path, "malformed PFM header")
    dt = "<f4" if scale < 0 else ">f4"
    raw = lines[3]
    if len(raw) != w * h * 4:
        raise IngestionError(path, f"expected {w * h * 4} data bytes, found {len(raw)}")
    return np.flipud(np.frombuffer(raw, dtype=dt).reshape(h, w)).astype(np.float32)


def read_pfm(path) -> DepthMap:
    """Load a depth PFM. NaN marks missing data; other non-positive or infinite values are rejected."""
    arr = read_pfm_array(path)
    valid = ~np.isnan(arr)
    bad = valid & (~np.isfinite(arr) | (arr <= 0))
    if bad.any():
        raise IngestionError(path, f"{int(bad.sum())} non-positive or infinite depth values")
    return DepthMap(np.where(valid, arr, 0.0).astype(np.float32), valid)


# --- PPM / PGM ---------------------------------------------------------------

def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def write_ppm(path, rgb: np.ndarray) -> None:
    arr = rgb if np.asarray(rgb).dtype == np.uint8 else to_uint8(rgb)
    h, w, c = arr.shape
    if c != 3:
        raise ConfigurationError(f"PPM needs 3 channels, got {c}")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = _read_bytes(path)
    if not data.startswith(magic):
        raise IngestionError(path, f"expected {magic.decode()} magic")
    tokens, start = _netpbm_header(data[2:], 3, path)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise IngestionError(path, "malformed header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise IngestionError(path, "only 8-bit rasters are supported")
    raw = data[2 + start :]
    n = w * h * channels
    if len(raw) < n:
        raise IngestionError(path, f"expected {n} data bytes, found {len(raw)}")
    arr = np.frombuffer(raw[:n], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm_uint8(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_ppm(path) -> np.ndarray:
    """HxWx3 float32 image in [0, 1]."""
    return from_uint8(read_ppm_uint8(path))


def write_pgm(path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# --- 16-bit PNG depth ----------------------------------------------------------

def read_png_depth(path, scale: float = PNG_DEPTH_SCALE) -> DepthMap:
    """16-bit PNG depth: meters = value / scale, 0 marks a missing measurement."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise IngestionError(path, "file not found")
    try:
        with Image.open(path) as im:
            raw = np.array(im)
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise IngestionError(path, f"unreadable PNG ({exc})") from None
    if raw.ndim != 2 or raw.dtype.kind not in "iu":
        raise IngestionError(path, "expected a single-channel 16-bit PNG")
    if raw.min() < 0:
        raise IngestionError(path, "negative depth values")
    valid = raw > 0
    return DepthMap((raw.astype(np.float64) / scale).astype(np.float32), valid)


def write_png_depth(path, depth: DepthMap, scale: float = PNG_DEPTH_SCALE) -> None:
    from PIL import Image

    vals = np.where(depth.valid, np.round(depth.values * scale), 0)
    Image.fromarray(np.clip(vals, 0, 65535).astype(np.uint16)).save(path)


# --- camera text files ---------------------------------------------------------

def write_intrinsics(path, k: CameraIntrinsics) -> None:
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    text = _read_bytes(path).decode("ascii", errors="replace").split()
    if len(text) != 6:
        raise IngestionError(path, "intrinsics need 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(t) for t in text[:4])
        w, h = int(text[4]), int(text[5])
        return CameraIntrinsics(fx, fy, cx, cy, w, h)
    except (ValueError, ConfigurationError) as exc:
        raise IngestionError(path, f"invalid intrinsics ({exc})") from None


def write_pose(path, pose: RigidPose) -> None:
    vals = pose.matrix().reshape(-1)
    Path(path).write_text(" ".join(repr(float(v)) for v in vals) + "\n")


def read_pose(path) -> RigidPose:
    """First line of a pose file: 12 numbers, row-major ``[R | t]``."""
    lines = [ln for ln in _read_bytes(path).decode("ascii", errors="replace").splitlines() if ln.strip()]
    if not lines:
        raise IngestionError(path, "empty pose file")
    try:
        vals = np.array([float(t) for t in lines[0].split()])
    except ValueError:
        raise IngestionError(path, "non-numeric pose entry") from None
    if vals.size != 12:
        raise IngestionError(path, f"pose line needs 12 values, found {vals.size}")
    m = vals.reshape(3, 4)
    try:
        return RigidPose(m[:, :3], m[:, 3])
    except ConfigurationError:
        # poses written with limited precision: snap to the nearest rotation
        u, _, vt = np.linalg.svd(m[:, :3])
        r = u @ vt
        if np.linalg.det(r) < 0 or not np.allclose(r, m[:, :3], atol=1e-4):
            raise IngestionError(path, "pose rotation is not a proper rotation") from None
        return RigidPose(r, m[:, 3])
