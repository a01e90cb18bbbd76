"""Forward warping of an RGB-D image into another view by z-buffered splatting.

Each valid source pixel is lifted with its depth, moved into the target
camera and projected. In ``bilinear`` mode its color lands on the four
surrounding integer pixels with bilinear weights; in ``nearest`` mode on the
rounded pixel only. Per target pixel only splats close to the nearest one
survive (within ``max(eps_z, eps_rel * z_nearest)``), and their colors and
depths are blended by normalized weight. Pixels nothing lands on stay zero.

The backward pass keeps the surviving set fixed and differentiates the blend
through the bilinear weights, the projection and the rigid transform back to
the source depth and color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .geometry import Z_MIN, CameraIntrinsics, DepthMap, RigidPose, pixel_rays

EPS_Z = 1e-3
# neighbouring splats on a slanted surface differ by centimeters at a few
# meters; an absolute 1 mm window alone would make them occlude each other
EPS_REL = 0.02
# sub-pixel fractions this close to a grid line snap onto it, so an identity
# warp does not leak 1e-16 weights into neighbouring pixels
SNAP = 1e-9

# corner offsets (dx, dy) in the order the weight tables below use
_CORNERS = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])


@dataclass
class SplatRecords:
    """Everything the backward pass needs.

    Per projected source point (length ``P``): ``source`` flat pixel index,
    camera-2 point ``points``, continuous ``u``, ``v``, ``z``.
    Per surviving contribution (length ``M``): index ``point`` into the
    above, flat ``target`` pixel, ``weight``, and the weight derivatives
    ``dw_du``, ``dw_dv``.
    """

    source: np.ndarray
    points: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    point: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    dw_du: np.ndarray
    dw_dv: np.ndarray
    weight_sum: np.ndarray  # (H*W,) summed surviving weight per target pixel
    colors: np.ndarray  # (P, 3) source colors
    rotation: np.ndarray
    rays: np.ndarray  # (P, 3) unit-z source rays
    fx: float
    fy: float
    mode: str

    def winners(self) -> np.ndarray:
        """Per target pixel, the source pixel with the largest surviving weight (-1 if unhit)."""
        n = self.weight_sum.size
        best = np.full(n, -1, dtype=np.int64)
        order = np.lexsort((-self.weight, self.target))
        tgt = self.target[order]
        first = np.ones(len(tgt), dtype=bool)
        first[1:] = tgt[1:] != tgt[:-1]
        best[tgt[first]] = self.source[self.point[order[first]]]
        return best

    def signature(self) -> bytes:
        """Discrete state of the splat: which contributions survived where."""
        key = np.stack([self.source[self.point], self.target]).astype(np.int64)
        return key.tobytes()


@dataclass
class WarpResult:
    image: np.ndarray  # (H, W, 3), zero where unhit
    depth: DepthMap  # target-view z, invalid where unhit
    hit_mask: np.ndarray  # (H, W) bool
    splat_records: SplatRecords | None


@dataclass
class WarpGradients:
    d_depth: np.ndarray  # (H, W)
    d_rgb: np.ndarray  # (H, W, 3)


def _bilinear(u, v, width, height):
    u0 = np.floor(u)
    v0 = np.floor(v)
    a = u - u0
    b = v - v0
    up = a > 1.0 - SNAP
    u0 = np.where(up, u0 + 1.0, u0)
    a = np.where(up | (a < SNAP), 0.0, a)
    vp = b > 1.0 - SNAP
    v0 = np.where(vp, v0 + 1.0, v0)
    b = np.where(vp | (b < SNAP), 0.0, b)
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    dwa = np.stack([-(1 - b), 1 - b, -b, b], axis=1)
    dwb = np.stack([-(1 - a), -a, 1 - a, a], axis=1)
    x = u0[:, None].astype(np.int64) + _CORNERS[:, 0]
    y = v0[:, None].astype(np.int64) + _CORNERS[:, 1]
    return x, y, w, dwa, dwb


def _nearest(u, v):
    x = np.floor(u + 0.5).astype(np.int64)[:, None]
    y = np.floor(v + 0.5).astype(np.int64)[:, None]
    one = np.ones((len(u), 1))
    zero = np.zeros((len(u), 1))
    return x, y, one, zero, zero


def forward_warp(
    rgb1: np.ndarray,
    depth1: DepthMap,
    k: CameraIntrinsics,
    rel: RigidPose,
    mode: str = "bilinear",
    eps_z: float = EPS_Z,
    record: bool = True,
    eps_rel: float = EPS_REL,
) -> WarpResult:
    """Render ``rgb1`` seen with ``depth1`` from the camera ``rel`` maps into.

    ``rel`` takes source-camera coordinates to target-camera coordinates (see
    ``geometry.relative_pose``). Both views share ``k``.
    """
    if mode not in ("bilinear", "nearest"):
        raise ConfigurationError(f"unknown splat mode {mode!r}")
    k.check_shape(depth1.shape, "depth")
    k.check_shape(np.shape(rgb1), "rgb")
    h, w = k.height, k.width
    rgb = np.asarray(rgb1, dtype=np.float64).reshape(-1, 3)

    src = np.flatnonzero(depth1.valid)
    z_src = depth1.values.reshape(-1)[src].astype(np.float64)
    rays = pixel_rays(k).reshape(-1, 3)[src]
    pts = (rays * z_src[:, None]) @ rel.rotation.T + rel.translation
    zt = pts[:, 2]
    ok = zt > Z_MIN
    src, pts, zt, rays = src[ok], pts[ok], zt[ok], rays[ok]
    u = k.fx * pts[:, 0] / zt + k.cx
    v = k.fy * pts[:, 1] / zt + k.cy
    # drop points whose whole footprint is off-image before building corners
    on = (u > -1.0) & (u < w) & (v > -1.0) & (v < h)
    src, pts, zt, rays, u, v = src[on], pts[on], zt[on], rays[on], u[on], v[on]

    if mode == "bilinear":
        x, y, wt, dwa, dwb = _bilinear(u, v, w, h)
    else:
        x, y, wt, dwa, dwb = _nearest(u, v)
    npts, ncorner = wt.shape
    point = np.repeat(np.arange(npts), ncorner)
    x, y, wt, dwa, dwb = x.ravel(), y.ravel(), wt.ravel(), dwa.ravel(), dwb.ravel()
    keep = (wt > 0) & (x >= 0) & (x < w) & (y >= 0) & (y < h)
    point, x, y, wt, dwa, dwb = point[keep], x[keep], y[keep], wt[keep], dwa[keep], dwb[keep]
    target = y * w + x
    zc = zt[point]

    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, target, zc)
    zm = zmin[target]
    survive = zc <= zm + np.maximum(eps_z, eps_rel * zm)
    point, target, wt, dwa, dwb, zc = (
        point[survive], target[survive], wt[survive], dwa[survive], dwb[survive], zc[survive],
    )

    colors = rgb[src]
    wsum = np.bincount(target, weights=wt, minlength=h * w)
    hit = wsum > 0
    safe = np.where(hit, wsum, 1.0)
    image = np.stack(
        [np.bincount(target, weights=wt * colors[point, c], minlength=h * w) for c in range(3)], axis=1
    ) / safe[:, None]
    dep = np.bincount(target, weights=wt * zc, minlength=h * w) / safe
    image[~hit] = 0.0
    dep[~hit] = 0.0

    records = None
    if record:
        records = SplatRecords(
            source=src, points=pts, u=u, v=v, z=zt, point=point, target=target, weight=wt,
            dw_du=dwa, dw_dv=dwb, weight_sum=wsum, colors=colors, rotation=rel.rotation.copy(),
            rays=rays, fx=k.fx, fy=k.fy, mode=mode,
        )
    hit2 = hit.reshape(h, w)
    return WarpResult(
        image=image.reshape(h, w, 3),
        depth=DepthMap(dep.reshape(h, w), hit2.copy()),
        hit_mask=hit2,
        splat_records=records,
    )


def warp_backward(result: WarpResult, grad_image: np.ndarray, grad_depth: np.ndarray | None = None) -> WarpGradients:
    """Gradients of a downstream scalar w.r.t. source depth and color.

    The surviving splat set is held fixed (straight-through z-test).
    """
    rec = result.splat_records
    if rec is None:
        raise ContractError("warp_backward needs a WarpResult produced with record=True")
    h, w = result.hit_mask.shape
    gi = np.asarray(grad_image, dtype=np.float64).reshape(-1, 3)
    gd = np.zeros(h * w) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64).reshape(-1)
    img = result.image.reshape(-1, 3)
    dep = result.depth.values.reshape(-1)
    npts = len(rec.source)

    t = rec.target
    p = rec.point
    wn = rec.weight / rec.weight_sum[t]  # normalized weight
    gi_t = gi[t]
    # color path: blend is linear in the source colors
    d_col = np.stack([np.bincount(p, weights=wn * gi_t[:, c], minlength=npts) for c in range(3)], axis=1)
    # geometry path through the normalized weights
    zc = rec.z[p]
    dl_dw = (np.einsum("ij,ij->i", gi_t, rec.colors[p] - img[t]) + gd[t] * (zc - dep[t])) / rec.weight_sum[t]
    g_u = np.bincount(p, weights=dl_dw * rec.dw_du, minlength=npts)
    g_v = np.bincount(p, weights=dl_dw * rec.dw_dv, minlength=npts)
    g_z = np.bincount(p, weights=gd[t] * wn, minlength=npts)

    x, y, z = rec.points[:, 0], rec.points[:, 1], rec.points[:, 2]
    g_pt = np.stack(
        [g_u * rec.fx / z, g_v * rec.fy / z, -(g_u * rec.fx * x + g_v * rec.fy * y) / (z * z) + g_z],
        axis=1,
    )
    dpt_dz = rec.rays @ rec.rotation.T  # d(camera-2 point)/d(source depth)
    d_src = np.einsum("ij,ij->i", g_pt, dpt_dz)

    d_depth = np.zeros(h * w)
    d_rgb = np.zeros((h * w, 3))
    d_depth[rec.source] = d_src
    d_rgb[rec.source] = d_col
    return WarpGradients(d_depth.reshape(h, w), d_rgb.reshape(h, w, 3))


def warp_tensor(rgb, depth, intrinsics, rel_poses, valid=None, mode: str = "bilinear", eps_z: float = EPS_Z,
                eps_rel: float = EPS_REL):
    """Batched, tape-recorded ``forward_warp``.

    ``rgb`` is an ``(N, 3, H, W)`` tensor or array, ``depth`` an ``(N, 1, H, W)``
    tensor; ``intrinsics`` and ``rel_poses`` are per-sample sequences. Returns
    an ``(N, 4, H, W)`` tensor (warped RGB then warped depth) and the list of
    per-sample ``WarpResult``.
    """
    from .tensor.core import Tensor, record

    rgb_t = rgb if isinstance(rgb, Tensor) else None
    rgb_d = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    dd = depth.data
    n, _, h, w = dd.shape
    if rgb_d.shape != (n, 3, h, w):
        raise ConfigurationError(f"rgb shape {rgb_d.shape} does not match depth shape {dd.shape}")
    results = []
    out = np.zeros((n, 4, h, w), dtype=dd.dtype)
    for i in range(n):
        z = dd[i, 0].astype(np.float64)
        m = np.isfinite(z) & (z > 0)
        if valid is not None:
            m &= np.asarray(valid[i], dtype=bool)
        res = forward_warp(
            rgb_d[i].transpose(1, 2, 0), DepthMap(np.where(m, z, 0.0), m),
            intrinsics[i], rel_poses[i], mode=mode, eps_z=eps_z, eps_rel=eps_rel,
        )
        results.append(res)
        out[i, :3] = res.image.transpose(2, 0, 1)
        out[i, 3] = res.depth.values
    out_t = Tensor(out)

    def _backward(g):
        gdep = np.zeros_like(dd)
        grgb = np.zeros_like(rgb_d) if rgb_t is not None and rgb_t.requires_grad else None
        for i, res in enumerate(results):
            wg = warp_backward(res, g[i, :3].transpose(1, 2, 0), g[i, 3])
            gdep[i, 0] = wg.d_depth
            if grgb is not None:
                grgb[i] = wg.d_rgb.transpose(2, 0, 1)
        return (gdep, grgb) if rgb_t is not None else (gdep,)

    inputs = (depth, rgb_t) if rgb_t is not None else (depth,)
    decisions = b"".join(r.splat_records.signature() for r in results)
    return record("forward_warp", inputs, out_t, _backward, decisions=decisions), results
