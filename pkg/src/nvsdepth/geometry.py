"""Pinhole camera model, rigid poses and point clouds.

Everything here runs in float64. Integer pixel ``(u, v)`` is the sample at
continuous coordinate ``(u, v)``, so projecting an unprojected pixel returns
the same integer coordinates up to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

# Points at or closer than this (meters, camera z) are not projectable.
Z_MIN = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def check_shape(self, shape, what: str = "raster") -> None:
        if tuple(shape[:2]) != self.shape:
            raise ConfigurationError(
                f"{what} has shape {tuple(shape[:2])}, intrinsics expect {self.shape}"
            )

    @classmethod
    def default(cls, width: int, height: int, focal: float | None = None) -> "CameraIntrinsics":
        """Centered principal point; focal defaults to the image width (about 53 deg FOV)."""
        f = float(width if focal is None else focal)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def _check_rotation(r: np.ndarray, tol: float = 1e-9) -> None:
    if r.shape != (3, 3):
        raise ConfigurationError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0):
        raise ConfigurationError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ConfigurationError("rotation determinant is not +1")


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world transform: ``x_world = rotation @ x_cam + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        _check_rotation(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``angle`` in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    r = np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)
    # re-orthonormalize so the 1e-9 invariant holds for any input
    u, _, vt = np.linalg.svd(r)
    return u @ vt


@dataclass
class DepthMap:
    """Dense depth in meters plus a validity mask."""

    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ConfigurationError(f"depth map must be HxW, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ConfigurationError(
                    f"valid mask shape {self.valid.shape} != depth shape {self.values.shape}"
                )
        v = self.values[self.valid]
        if v.size and not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ConfigurationError("valid depth values must be finite and strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.valid.copy())


def check_image(rgb: np.ndarray, what: str = "image") -> np.ndarray:
    """Validate an HxWx3 raster with every entry finite and within [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigurationError(f"{what} must be HxWx3, got shape {rgb.shape}")
    if not np.all(np.isfinite(rgb)) or rgb.min(initial=0.0) < 0.0 or rgb.max(initial=0.0) > 1.0:
        raise ConfigurationError(f"{what} values must be finite and within [0, 1]")
    return rgb


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    pixel_index: np.ndarray  # (N,) flat source index v * W + u
    colors: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.points)


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) rays with unit z for every pixel."""
    v, u = np.mgrid[0 : k.height, 0 : k.width].astype(np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def unproject(depth: DepthMap, rgb: np.ndarray, k: CameraIntrinsics) -> PointCloud:
    """Lift every valid pixel to a camera-frame 3-D point."""
    k.check_shape(depth.shape, "depth")
    k.check_shape(np.shape(rgb), "rgb")
    idx = np.flatnonzero(depth.valid)
    z = depth.values.reshape(-1)[idx].astype(np.float64)
    u = (idx % k.width).astype(np.float64)
    v = (idx // k.width).astype(np.float64)
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)
    colors = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)[idx]
    return PointCloud(pts.reshape(-1, 3), idx, colors.reshape(-1, 3))


def relative_pose(source: RigidPose, target: RigidPose) -> RigidPose:
    """Transform taking source-camera coordinates to target-camera coordinates."""
    rt = target.rotation.T
    return RigidPose(rt @ source.rotation, rt @ (source.translation - target.translation))


def transform_points(pc: PointCloud, rel: RigidPose) -> PointCloud:
    return PointCloud(rel.apply(pc.points), pc.pixel_index.copy(), pc.colors.copy())


def project(points: np.ndarray, k: CameraIntrinsics):
    """Project camera-frame points.

    Accepts a single 3-vector or an (N, 3) array and returns ``(u, v, z, ok)``
    where ``ok`` is False for points with ``z <= Z_MIN``; their ``u, v`` are NaN.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    z = p[:, 2]
    ok = z > Z_MIN
    safe = np.where(ok, z, 1.0)
    u = np.where(ok, k.fx * p[:, 0] / safe + k.cx, np.nan)
    v = np.where(ok, k.fy * p[:, 1] / safe + k.cy, np.nan)
    if single:
        return float(u[0]), float(v[0]), float(z[0]), bool(ok[0])
    return u, v, z, ok
