"""Loss terms for tracking and mapping, each returning its value and partial gradients."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Frame, Pose, in_image, project_points

TERMS = ("rgb", "d", "sdf", "fs", "warp_rgb", "warp_d")


@dataclass
class LossWeights:
    rgb: float = 10.0
    d: float = 1.0
    sdf: float = 50.0
    fs: float = 5.0
    warp_rgb: float = 1.0
    warp_d: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class LossBreakdown:
    terms: dict = field(default_factory=lambda: {k: 0.0 for k in TERMS})
    counts: dict = field(default_factory=lambda: {k: 0 for k in TERMS})
    total: float = 0.0


def total_loss(terms: dict, weights: LossWeights, include_warp: bool = True, counts: dict | None = None) -> LossBreakdown:
    terms = {k: float(terms.get(k, 0.0)) for k in TERMS}
    if not include_warp:
        terms["warp_rgb"] = terms["warp_d"] = 0.0
    w = asdict(weights)
    total = sum(w[k] * terms[k] for k in TERMS)
    counts = {k: int((counts or {}).get(k, 0)) for k in TERMS}
    return LossBreakdown(terms, counts, total)


def loss_render(color_hat, depth_hat, valid, color_obs, depth_obs):
    """Mean colour-error norm and mean absolute depth error over non-empty rays.

    Returns ``(L_rgb, L_d, n_rgb, n_d, dL_rgb/dcolor (R, 3), dL_d/ddepth (R,))``;
    rays whose observed depth is missing are left out of the depth term only.
    """
    valid = np.asarray(valid, dtype=bool)
    diff = np.asarray(color_hat) - np.asarray(color_obs, dtype=np.float64)
    norm = np.linalg.norm(diff, axis=1)
    n_rgb = int(valid.sum())
    g_color = np.zeros_like(diff)
    L_rgb = 0.0
    if n_rgb:
        L_rgb = float(norm[valid].sum() / n_rgb)
        safe = np.where(norm > 0, norm, 1.0)
        g_color = np.where((valid & (norm > 0))[:, None], diff / safe[:, None], 0.0) / n_rgb

    dmask = valid & (np.asarray(depth_obs) > 0)
    n_d = int(dmask.sum())
    ddiff = np.asarray(depth_hat) - np.asarray(depth_obs, dtype=np.float64)
    g_depth = np.zeros(len(ddiff))
    L_d = 0.0
    if n_d:
        L_d = float(np.abs(ddiff[dmask]).sum() / n_d)
        g_depth = np.where(dmask, np.sign(ddiff), 0.0) / n_d
    return L_rgb, L_d, n_rgb, n_d, g_color, g_depth


def loss_sdf(ray_idx, s, d, depth_obs, ray_ok, tr: float):
    """Free-space and truncation-band SDF losses over per-ray sample sets.

    ``ray_idx``, ``s``, ``d`` describe samples (sorted by ray); ``depth_obs`` and
    ``ray_ok`` are per ray. Free-space samples satisfy ``d < D - tr`` and are pulled to
    ``+tr``; band samples ``|D - d| <= tr`` are pulled to ``D - d``. Each ray's term is
    the mean over its set; the batch term averages over all rays in ``ray_ok``.

    Returns ``(L_fs, L_sdf, n_fs, n_sdf, dL_fs/ds, dL_sdf/ds)``.
    """
    ray_idx = np.asarray(ray_idx, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    depth_obs = np.asarray(depth_obs, dtype=np.float64)
    ray_ok = np.asarray(ray_ok, dtype=bool) & (depth_obs > 0)
    n_rays = len(depth_obs)
    R = int(ray_ok.sum())
    zero = np.zeros(len(s))
    if R == 0 or len(s) == 0:
        return 0.0, 0.0, 0, 0, zero, zero.copy()
    D = depth_obs[ray_idx]
    ok = ray_ok[ray_idx]
    fs = ok & (d < D - tr)
    band = ok & (np.abs(D - d) <= tr)

    out = []
    for mask, target in ((fs, np.full(len(s), tr)), (band, D - d)):
        n_per = np.bincount(ray_idx[mask], minlength=n_rays).astype(np.float64)
        resid = np.where(mask, s - target, 0.0)
        per_ray = np.bincount(ray_idx, weights=resid**2, minlength=n_rays)
        has = n_per > 0
        L = float((per_ray[has] / n_per[has]).sum() / R)
        denom = np.where(has, n_per, 1.0)[ray_idx]
        g = 2.0 * resid / denom / R
        out.append((L, int(has.sum()), g))
    (L_fs, n_fs, g_fs), (L_sdf, n_sdf, g_sdf) = out
    return L_fs, L_sdf, n_fs, n_sdf, g_fs, g_sdf


def bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear lookup with border clamping. Returns ``(values, d/du, d/dv)``."""
    H, W = img.shape[:2]
    img = img.reshape(H, W, -1).astype(np.float64)
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), W - 2) if W > 1 else np.zeros(len(u), dtype=np.int64)
    v0 = np.minimum(np.floor(vc).astype(np.int64), H - 2) if H > 1 else np.zeros(len(v), dtype=np.int64)
    a = (uc - u0)[:, None]
    b = (vc - v0)[:, None]
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i01 + (1 - a) * b * i10 + a * b * i11
    du = (1 - b) * (i01 - i00) + b * (i11 - i10)
    dv = (1 - a) * (i10 - i00) + a * (i11 - i01)
    du = np.where(((u >= 0) & (u <= W - 1))[:, None], du, 0.0)
    dv = np.where(((v >= 0) & (v <= H - 1))[:, None], dv, 0.0)
    return val, du, dv


@dataclass
class WarpResult:
    """Gradients are stacked per term: index 0 is the RGB term, 1 the depth term."""

    warp_rgb: float
    warp_d: float
    count: int
    grad_current: np.ndarray
    grad_window: np.ndarray


def sample_valid_pixels(frame: Frame, n: int, rng: np.random.Generator):
    """Uniformly draw ``n`` pixels (with replacement) among those with valid depth.

    Returns ``(u, v)`` integer arrays, empty when the frame has no valid depth.
    """
    v, u = frame.valid_pixels()
    if len(u) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pick = rng.integers(0, len(u), n)
    return u[pick], v[pick]


def loss_warp(current: Frame, window: list[Frame], intr: CameraIntrinsics, pixels, pose_c: Pose | None = None, poses_w: list[Pose] | None = None) -> WarpResult:
    """Photometric and depth residuals of current-frame pixels warped into window frames.

    ``pixels`` is ``(u, v)`` of valid-depth pixels on the current frame. Out-of-view
    warps are skipped, as are depth residuals where the target depth is missing.
    Both terms are normalised by the number of sampled pixels only. Gradients are
    returned for the current pose and each window pose (left-perturbation tangents).
    """
    pose_c = current.pose if pose_c is None else pose_c
    poses_w = [f.pose for f in window] if poses_w is None else poses_w
    u, v = (np.asarray(a, dtype=np.int64) for a in pixels)
    n = len(u)
    g_cur = np.zeros((2, 6))
    g_win = np.zeros((2, len(window), 6))
    if n == 0 or not window:
        return WarpResult(0.0, 0.0, 0, g_cur, g_win)
    D_c = current.depth[v, u].astype(np.float64)
    I_c = current.color[v, u].astype(np.float64)
    pts_c = intr.pixel_rays(u, v) * D_c[:, None]
    X = pose_c.apply(pts_c)

    L_R = L_D = 0.0
    count = 0
    for k, (frame_w, pose_w) in enumerate(zip(window, poses_w)):
        if pose_w is pose_c or np.array_equal(pose_w.matrix(), pose_c.matrix()):
            # identity warp, kept exact instead of round-tripping through the world frame
            p_w = pts_c
            q, z = np.stack([u, v], axis=1).astype(np.float64), pts_c[:, 2].copy()
        else:
            p_w = pose_w.apply_inverse(X)
            q, z = project_points(p_w, intr)
        vis = (z > 0) & in_image(q, intr)
        if not vis.any():
            continue
        count += int(vis.sum())
        qv, pv, Xv = q[vis], p_w[vis], X[vis]
        I_w, dIu, dIv = bilinear(frame_w.color, qv[:, 0], qv[:, 1])
        r = I_c[vis] - I_w
        L_R += np.abs(r).mean(axis=1).sum() / n
        gI = -np.sign(r) / (3.0 * n)  # d loss / d I_w
        g_u = (gI * dIu).sum(1)
        g_v = (gI * dIv).sum(1)

        ui = np.clip(np.round(qv[:, 0]).astype(np.int64), 0, intr.width - 1)
        vi = np.clip(np.round(qv[:, 1]).astype(np.int64), 0, intr.height - 1)
        D_w = frame_w.depth[vi, ui].astype(np.float64)
        dok = D_w > 0
        rd = np.where(dok, pv[:, 2] - D_w, 0.0)
        L_D += np.abs(rd).sum() / n
        g_z_depth = np.where(dok, np.sign(rd), 0.0) / n

        x, y, zz = pv[:, 0], pv[:, 1], pv[:, 2]
        g_p = np.stack(
            [
                g_u * intr.fx / zz,
                g_v * intr.fy / zz,
                -g_u * intr.fx * x / zz**2 - g_v * intr.fy * y / zz**2,
            ],
            axis=1,
        )
        g_pD = np.zeros_like(g_p)
        g_pD[:, 2] = g_z_depth
        for term, gp in enumerate((g_p, g_pD)):
            g_X = gp @ pose_w.rotation.T
            tang = np.concatenate([g_X.sum(0), np.cross(Xv, g_X).sum(0)])
            g_cur[term] += tang
            g_win[term, k] -= tang
    return WarpResult(float(L_R), float(L_D), count, g_cur, g_win)
