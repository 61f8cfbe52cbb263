"""Sparse volume rendering over the hybrid voxel map.

Samples sit on a fixed lattice along each ray, ``t_k = (k + 1/2) * step`` (metric
distance along the unit ray direction), and are kept only where they fall inside
an allocated leaf. Per-sample SDF is the interpolated prior plus the decoded
residual; weights are ``sigmoid(s/tr) * sigmoid(-s/tr)`` and the ray colour and
depth are weight-normalised sums. Depth is camera z-depth, so a sample at metric
distance ``t`` has depth ``t * dir_cam_z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder
from .geometry import CameraIntrinsics, Pose
from .svo import CORNER_OFFSETS, HybridVoxelMap, trilinear_weights

EMPTY_EPS = 1e-8


class EmptyRay(Exception):
    """Raised by the single-ray API when the weights vanish or no sample exists."""


@dataclass
class RenderConfig:
    tr: float = 0.1
    step: float = 0.05
    max_samples: int = 48
    max_range: float = 10.0
    dtype: str = "float64"


def weight(s, tr: float):
    x = np.asarray(s, dtype=np.float64) / tr
    return decoder.sigmoid(x) * decoder.sigmoid(-x)


def weight_grad(s, tr: float):
    x = np.asarray(s, dtype=np.float64) / tr
    sp = decoder.sigmoid(x)
    sn = decoder.sigmoid(-x)
    return sp * sn * (sn - sp) / tr


# ------------------------------------------------------------- single-ray API
@dataclass
class RaySample:
    t: float
    point: np.ndarray
    d: float
    E: np.ndarray | None = None
    s_coarse: float = 0.0
    s: float = 0.0
    color: np.ndarray | None = None
    w: float = 0.0


@dataclass
class RenderResult:
    color: np.ndarray
    depth: float
    samples: list = field(default_factory=list)
    coefficients: np.ndarray | None = None


def sample_ray(vmap: HybridVoxelMap, origin, direction, max_range: float, step: float) -> np.ndarray:
    """Lattice sample distances inside the allocated leaves pierced by the ray."""
    ts = []
    for _, t0, t1 in vmap.ray_voxel_intersect(origin, direction, max_range):
        k0 = int(np.ceil(t0 / step - 0.5))
        k = np.arange(k0, int(np.ceil(t1 / step - 0.5)))
        t = (k + 0.5) * step
        ts.append(t[(t >= t0) & (t < t1) & (t <= max_range)])
    return np.concatenate(ts) if ts else np.zeros(0)


def composite(samples: list[RaySample]) -> RenderResult:
    w = np.array([s.w for s in samples], dtype=np.float64)
    W = w.sum() if len(w) else 0.0
    if W <= EMPTY_EPS:
        raise EmptyRay("sum of weights below threshold")
    coef = w / W
    color = sum(c * s.color for c, s in zip(coef, samples))
    depth = float(sum(c * s.d for c, s in zip(coef, samples)))
    return RenderResult(np.asarray(color, dtype=np.float64), depth, list(samples), coef)


def render_pixel(vmap: HybridVoxelMap, params: dict, pose: Pose, pixel, intr: CameraIntrinsics, tr: float = 0.1, step: float = 0.05, max_range: float = 10.0, max_samples: int = 48) -> RenderResult:
    d_cam = intr.pixel_rays(pixel[0], pixel[1])
    d_cam = d_cam / np.linalg.norm(d_cam)
    direction = pose.rotation @ d_cam
    ts = sample_ray(vmap, pose.translation, direction, max_range, step)[:max_samples]
    if len(ts) == 0:
        raise EmptyRay("ray misses the allocated map")
    samples = []
    for t in ts:
        p = pose.translation + t * direction
        E, s_c = vmap.trilerp(p)
        c, s_res = decoder.decode(params, E)
        s = s_c + s_res
        samples.append(RaySample(t, p, t * d_cam[2], E, s_c, s, c, float(weight(s, tr))))
    return composite(samples)


# ------------------------------------------------------------- batched API
def ray_aabb(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    return tmin.max(axis=1), tmax.min(axis=1)


def sample_rays_batch(vmap: HybridVoxelMap, origins, dirs, max_range: float, step: float, max_samples: int):
    """Masked lattice sampling for many rays at once.

    Returns ``(ray_index, t, points, leaf)`` for every kept sample, ordered by ray then t.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    b = vmap.bounds()
    if b is None or n == 0:
        return empty
    tmin, tmax = ray_aabb(origins, dirs, b[0], b[1])
    tmin = np.maximum(tmin, 0.0)
    tmax = np.minimum(tmax, max_range)
    hit = tmax > tmin
    k_lo = np.where(hit, np.ceil(tmin / step - 0.5), 0).astype(np.int64)
    k_hi = np.where(hit, np.floor(tmax / step - 0.5) + 1, 0).astype(np.int64)
    count = np.maximum(k_hi - k_lo, 0)
    K = int(count.max()) if n else 0
    if K == 0:
        return empty
    ks = k_lo[:, None] + np.arange(K)[None, :]
    in_range = np.arange(K)[None, :] < count[:, None]
    t = (ks + 0.5) * step
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    leaf = np.full(t.shape, -1, dtype=np.int64)
    leaf[in_range] = vmap.lookup_leaves(np.floor(pts[in_range] / vmap.voxel_size).astype(np.int64))
    keep = leaf >= 0
    keep &= np.cumsum(keep, axis=1) <= max_samples
    ray_idx = np.broadcast_to(np.arange(n)[:, None], t.shape)[keep]
    return ray_idx, t[keep], pts[keep], leaf[keep]


@dataclass
class RenderBatch:
    """Forward state of a batch of rays; ``backward`` threads gradients to every input."""

    n_rays: int
    ray_frame: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    ray_idx: np.ndarray
    t: np.ndarray
    d: np.ndarray
    points: np.ndarray
    s: np.ndarray
    s_coarse: np.ndarray
    c: np.ndarray
    w: np.ndarray
    W: np.ndarray
    verts: np.ndarray
    tri_w: np.ndarray
    frac: np.ndarray
    cache: tuple
    voxel_size: float
    tr: float

    def samples_of(self, r: int) -> slice:
        lo = np.searchsorted(self.ray_idx, r, "left")
        hi = np.searchsorted(self.ray_idx, r, "right")
        return slice(lo, hi)

    def backward(self, vmap: HybridVoxelMap, params: dict, grad_color=None, grad_depth=None, grad_s=None, n_frames: int = 1, need=("params", "features", "sdf", "pose")):
        """Gradients of a scalar loss given its partials w.r.t. ray colour (R, 3),
        ray depth (R,) and per-sample SDF (M,).

        Returns a dict with any of ``params`` (dict), ``features`` (Nv, D), ``sdf`` (Nv,)
        and ``pose`` (n_frames, 6) in left-perturbation tangent coordinates.
        """
        M = len(self.s)
        ri = self.ray_idx
        W = self.W[ri]
        okr = self.valid[ri]
        Wsafe = np.where(okr, W, 1.0)
        g_w = np.zeros(M)
        g_c = np.zeros((M, 3))
        if grad_color is not None:
            gC = grad_color[ri]
            g_w += np.where(okr, np.einsum("mk,mk->m", gC, self.c - self.color[ri]) / Wsafe, 0.0)
            g_c += np.where(okr[:, None], gC * (self.w / Wsafe)[:, None], 0.0)
        if grad_depth is not None:
            gD = grad_depth[ri]
            g_w += np.where(okr, gD * (self.d - self.depth[ri]) / Wsafe, 0.0)
        g_s = g_w * weight_grad(self.s, self.tr)
        if grad_s is not None:
            g_s = g_s + grad_s

        out = {}
        need_E = "features" in need or "pose" in need
        pgrads, g_E = decoder.backward(params, self.cache, g_c, g_s, need_input_grad=need_E, need_param_grad="params" in need)
        if "params" in need:
            out["params"] = pgrads
        if "features" in need or "sdf" in need:
            gf, gsd = vmap.scatter_batch(
                self.verts,
                self.tri_w,
                g_E if "features" in need else None,
                g_s if "sdf" in need else None,
            )
            if "features" in need:
                out["features"] = gf
            if "sdf" in need:
                out["sdf"] = gsd
        if "pose" in need:
            # d(trilerp)/d(point) through the corner weights
            vals = np.einsum("md,mkd->mk", g_E, vmap._features[self.verts]) + g_s[:, None] * vmap._sdf[self.verts]
            f = self.frac[:, None, :]
            base = np.where(CORNER_OFFSETS == 1, f, 1.0 - f)
            sign = np.where(CORNER_OFFSETS == 1, 1.0, -1.0)
            g_frac = np.zeros((M, 3))
            for a in range(3):
                others = [b for b in range(3) if b != a]
                dw = sign[None, :, a] * base[:, :, others[0]] * base[:, :, others[1]]
                g_frac[:, a] = np.einsum("mk,mk->m", vals, dw)
            g_p = g_frac / self.voxel_size
            fr = self.ray_frame[ri]
            g_pose = np.zeros((n_frames, 6))
            torque = np.cross(self.points, g_p)
            for a in range(3):
                g_pose[:, a] = np.bincount(fr, weights=g_p[:, a], minlength=n_frames)
                g_pose[:, 3 + a] = np.bincount(fr, weights=torque[:, a], minlength=n_frames)
            out["pose"] = g_pose
        return out


def camera_rays(intr: CameraIntrinsics, pixels):
    """Unit camera-frame directions for pixels (N, 2) and their z components."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = intr.pixel_rays(pixels[:, 0], pixels[:, 1])
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return d, d[:, 2]


def render_rays(vmap: HybridVoxelMap, params: dict, poses: list[Pose], ray_frame, pixels, intr: CameraIntrinsics, cfg: RenderConfig) -> RenderBatch:
    """Render pixels (N, 2), each viewed from ``poses[ray_frame[i]]``."""
    ray_frame = np.asarray(ray_frame, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(pixels)
    d_cam, cos_z = camera_rays(intr, pixels)
    R = np.stack([p.rotation for p in poses])[ray_frame]
    origins = np.stack([p.translation for p in poses])[ray_frame]
    dirs = np.einsum("nij,nj->ni", R, d_cam)

    ray_idx, t, pts, leaf = sample_rays_batch(vmap, origins, dirs, cfg.max_range, cfg.step, cfg.max_samples)
    scaled = pts / vmap.voxel_size
    frac = scaled - np.floor(scaled)
    verts = vmap.leaf_vertices[leaf]
    tri_w = trilinear_weights(frac)
    E = np.einsum("mk,mkd->md", tri_w, vmap._features[verts])
    s_c = np.einsum("mk,mk->m", tri_w, vmap._sdf[verts])
    c, s_res, cache = decoder.forward(params, E, dtype=np.dtype(cfg.dtype))
    s = s_c + s_res
    w = weight(s, cfg.tr)
    d = t * cos_z[ray_idx]

    Wr = np.bincount(ray_idx, weights=w, minlength=n)
    valid = Wr > EMPTY_EPS
    Ws = np.where(valid, Wr, 1.0)
    color = np.stack([np.bincount(ray_idx, weights=w * c[:, k], minlength=n) for k in range(3)], axis=1) / Ws[:, None]
    depth = np.bincount(ray_idx, weights=w * d, minlength=n) / Ws
    color[~valid] = 0.0
    depth[~valid] = 0.0
    return RenderBatch(
        n, ray_frame, color, depth, valid, ray_idx, t, d, pts, s, s_c, c, w, Wr, verts, tri_w, frac, cache, vmap.voxel_size, cfg.tr
    )
