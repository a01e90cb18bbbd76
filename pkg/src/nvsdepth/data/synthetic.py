"""Procedural two-view scenes with analytically exact depth.

A scene lives in the first camera's frame: an optionally tilted back wall,
an optional floor, and a few textured boxes and rectangular cards. Both
cameras ray-cast it, so depth is the exact ray/primitive intersection.
Colors come from a solid (3-D) sinusoidal texture, which makes them
consistent between views.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from ..errors import ConfigurationError
from ..geometry import CameraIntrinsics, DepthMap, RigidPose, pixel_rays, rotation_from_axis_angle


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    focal: float = 0.0  # 0 -> image width
    min_depth: float = 2.0
    max_depth: float = 8.0
    num_primitives: int = 3
    backdrop: bool = True
    backdrop_depth: float = 0.0  # 0 -> sampled in [0.6, 1.0] * max_depth
    backdrop_tilt_deg: float = 15.0
    floor: bool = True
    floor_height: float = 1.2  # meters below the first camera
    max_rotation_deg: float = 5.0
    max_translation: float = 0.3
    texture_frequency: float = 1.0  # cycles per meter
    texture_amplitude: float = 0.2
    gt_dropout: float = 0.0  # fraction of GT pixels marked invalid
    randomize_world_pose: bool = True

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("image size must be positive")
        if not (0 < self.min_depth < self.max_depth):
            raise ConfigurationError("need 0 < min_depth < max_depth")
        if self.num_primitives < 0:
            raise ConfigurationError("num_primitives must be >= 0")
        if self.num_primitives == 0 and not self.backdrop and not self.floor:
            raise ConfigurationError("scene has no primitives")
        if self.max_rotation_deg < 0 or self.max_translation < 0:
            raise ConfigurationError("motion bounds must be non-negative")
        if not (0.0 <= self.gt_dropout < 1.0):
            raise ConfigurationError("gt_dropout must be in [0, 1)")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.default(self.width, self.height, self.focal or None)

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "SceneConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                raw = str(d[f.name]).strip()
                if f.type == "bool":
                    kw[f.name] = raw.lower() in ("1", "true", "yes", "on")
                elif f.type == "int":
                    kw[f.name] = int(raw)
                else:
                    kw[f.name] = float(raw)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**kw)


# A single fronto-parallel plane, used for the analytic and overfit checks.
def constant_plane_config(**kw) -> SceneConfig:
    base = dict(num_primitives=0, floor=False, backdrop=True, backdrop_tilt_deg=0.0)
    base.update(kw)
    return SceneConfig(**base)


@dataclass
class SceneSample:
    rgb1: np.ndarray
    rgb2: np.ndarray
    depth1: DepthMap
    depth2: DepthMap
    pose1: RigidPose
    pose2: RigidPose
    intrinsics: CameraIntrinsics
    id: str

    def validate(self) -> "SceneSample":
        k = self.intrinsics
        for name in ("rgb1", "rgb2"):
            k.check_shape(getattr(self, name).shape, name)
        for name in ("depth1", "depth2"):
            k.check_shape(getattr(self, name).shape, name)
        return self

    def reversed(self) -> "SceneSample":
        return SceneSample(self.rgb2, self.rgb1, self.depth2, self.depth1, self.pose2, self.pose1,
                           self.intrinsics, self.id + "~r")


# --- primitives ----------------------------------------------------------------

@dataclass
class _Texture:
    base: np.ndarray  # (3,)
    dirs: np.ndarray  # (3, 3) one direction per channel
    phase: np.ndarray  # (3,)

    def color(self, p: np.ndarray, freq: float, amp: float) -> np.ndarray:
        arg = 2.0 * np.pi * freq * (p @ self.dirs.T) + self.phase
        return np.clip(self.base + amp * np.sin(arg), 0.0, 1.0)


class _Plane:
    def __init__(self, point, normal, texture, half_extent=None, axes=None):
        self.point = np.asarray(point, float)
        self.normal = np.asarray(normal, float) / np.linalg.norm(normal)
        self.texture = texture
        self.half_extent = half_extent
        self.axes = axes

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        if self.half_extent is not None:
            p = o + t[:, None] * d
            rel = p - self.point
            inside = np.ones(len(t), dtype=bool)
            for ax, half in zip(self.axes, self.half_extent):
                inside &= np.abs(rel @ ax) <= half
            t = np.where(inside, t, np.inf)
        return t


class _Box:
    def __init__(self, lo, hi, texture):
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.texture = texture

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(hit, t, np.inf)


def _texture(rng, cfg) -> _Texture:
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return _Texture(rng.uniform(0.25, 0.75, 3), dirs, rng.uniform(0, 2 * np.pi, 3))


def _tilted_normal(rng, max_tilt_deg):
    n = np.array([0.0, 0.0, -1.0])
    if max_tilt_deg <= 0:
        return n
    axis = np.array([*rng.normal(size=2), 0.0])
    return rotation_from_axis_angle(axis, np.deg2rad(rng.uniform(0, max_tilt_deg))) @ n


def _build_scene(cfg: SceneConfig, rng):
    prims = []
    if cfg.backdrop:
        d = cfg.backdrop_depth or rng.uniform(0.6, 1.0) * cfg.max_depth
        prims.append(_Plane([0, 0, d], _tilted_normal(rng, cfg.backdrop_tilt_deg), _texture(rng, cfg)))
    if cfg.floor:
        prims.append(_Plane([0, cfg.floor_height, 0], [0, -1, 0], _texture(rng, cfg)))
    k = cfg.intrinsics()
    half_fov_x = (k.width / 2) / k.fx
    half_fov_y = (k.height / 2) / k.fy
    for _ in range(cfg.num_primitives):
        z = rng.uniform(cfg.min_depth, 0.8 * cfg.max_depth)
        x = rng.uniform(-0.8, 0.8) * half_fov_x * z
        tex = _texture(rng, cfg)
        if rng.random() < 0.5:
            size = rng.uniform(0.3, 0.9, 3) * z * half_fov_x * 0.5
            bottom = cfg.floor_height if cfg.floor else rng.uniform(-0.5, 0.8) * half_fov_y * z + size[1]
            lo = np.array([x - size[0], bottom - 2 * size[1], z])
            hi = np.array([x + size[0], bottom, z + 2 * size[2]])
            prims.append(_Box(lo, hi, tex))
        else:
            y = rng.uniform(-0.6, 0.6) * half_fov_y * z
            n = _tilted_normal(rng, 35.0)
            a1 = np.cross([0.0, 1.0, 0.0], n)
            a1 /= np.linalg.norm(a1)
            a2 = np.cross(n, a1)
            half = rng.uniform(0.2, 0.5, 2) * z * half_fov_x
            prims.append(_Plane([x, y, z], n, tex, half_extent=half, axes=(a1, a2)))
    return prims


def render(prims, k: CameraIntrinsics, cam_to_scene: RigidPose, freq: float, amp: float):
    """Ray-cast ``prims`` from a camera; returns (rgb float64 HxWx3, depth HxW, hit mask)."""
    rays = pixel_rays(k).reshape(-1, 3)
    d = rays @ cam_to_scene.rotation.T
    o = np.broadcast_to(cam_to_scene.translation, d.shape)
    best = np.full(len(d), np.inf)
    owner = np.full(len(d), -1)
    for i, prim in enumerate(prims):
        t = prim.intersect(o, d)
        closer = t < best
        best = np.where(closer, t, best)
        owner = np.where(closer, i, owner)
    hit = np.isfinite(best)
    rgb = np.zeros((len(d), 3))
    pts = o + np.where(hit, best, 0.0)[:, None] * d
    for i, prim in enumerate(prims):
        sel = owner == i
        if sel.any():
            rgb[sel] = prim.texture.color(pts[sel], freq, amp)
    # unit-z rays make the ray parameter equal to camera-frame depth
    depth = np.where(hit, best, 0.0)
    return rgb.reshape(k.height, k.width, 3), depth.reshape(k.height, k.width), hit.reshape(k.height, k.width)


def _random_pose(rng, max_rot_deg, max_trans) -> RigidPose:
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, max_rot_deg)) if max_rot_deg > 0 else 0.0
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * (rng.uniform(0.0, max_trans) if max_trans > 0 else 0.0)
    return RigidPose(rotation_from_axis_angle(axis, angle), t)


def _quantize(rgb: np.ndarray) -> np.ndarray:
    # store exactly what an 8-bit PPM round trip reproduces
    return (np.round(np.clip(rgb, 0, 1) * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0))


def _depth_map(depth, hit, rng, dropout) -> DepthMap:
    valid = hit.copy()
    if dropout > 0:
        valid &= rng.random(hit.shape) >= dropout
    return DepthMap(np.where(valid, depth, 0.0).astype(np.float32), valid)


def generate_sample(cfg: SceneConfig, seed: int, sample_id: str | None = None) -> SceneSample:
    """Deterministic in ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    prims = _build_scene(cfg, rng)
    motion = _random_pose(rng, cfg.max_rotation_deg, cfg.max_translation)  # camera 2 -> camera 1
    if cfg.randomize_world_pose:
        world = RigidPose(rotation_from_axis_angle([0, 1, 0], rng.uniform(-np.pi, np.pi)),
                          rng.uniform(-5, 5, 3))
    else:
        world = RigidPose.identity()
    k = cfg.intrinsics()
    rgb1, d1, h1 = render(prims, k, RigidPose.identity(), cfg.texture_frequency, cfg.texture_amplitude)
    rgb2, d2, h2 = render(prims, k, motion, cfg.texture_frequency, cfg.texture_amplitude)
    drop_rng = np.random.default_rng([seed, 1])
    return SceneSample(
        rgb1=_quantize(rgb1),
        rgb2=_quantize(rgb2),
        depth1=_depth_map(d1, h1, drop_rng, cfg.gt_dropout),
        depth2=_depth_map(d2, h2, drop_rng, cfg.gt_dropout),
        pose1=world,
        pose2=world.compose(motion),
        intrinsics=k,
        id=sample_id if sample_id is not None else f"s{seed}",
    ).validate()


def with_motion(cfg: SceneConfig, rotation_deg: float, translation: float) -> SceneConfig:
    return replace(cfg, max_rotation_deg=rotation_deg, max_translation=translation)
