"""Per-vertex SDF priors estimated from depth frames and fused by weighted averaging."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Frame, project_points
from .svo import HybridVoxelMap, VertexData


class Invalid(enum.IntEnum):
    OUT_OF_IMAGE = 1
    NO_DEPTH = 2
    OCCLUDED = 3


@dataclass(frozen=True)
class PriorEstimate:
    vertex: tuple
    s_curr: float
    n_curr: int


def estimate_priors(points_world: np.ndarray, frame: Frame, intr: CameraIntrinsics, voxel_size: float):
    """Projective SDF estimates ``D(u) - d_p`` for world points (N, 3).

    Returns ``(s, reason)``: ``reason`` is 0 for accepted estimates, otherwise an
    ``Invalid`` code, and ``s`` is nan wherever the estimate was rejected.
    """
    pts_cam = frame.pose.apply_inverse(np.asarray(points_world, dtype=np.float64).reshape(-1, 3))
    pix, d_p = project_points(pts_cam, intr)
    n = len(pts_cam)
    s = np.full(n, np.nan)
    reason = np.full(n, int(Invalid.OUT_OF_IMAGE), dtype=np.int8)

    with np.errstate(invalid="ignore"):
        ui = np.round(pix[:, 0])
        vi = np.round(pix[:, 1])
        inside = (d_p > 0) & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    ui = np.where(inside, ui, 0).astype(np.int64)
    vi = np.where(inside, vi, 0).astype(np.int64)
    D = np.where(inside, frame.depth[vi, ui].astype(np.float64), 0.0)

    has_depth = inside & (D > 0)
    reason[inside & ~has_depth] = Invalid.NO_DEPTH
    est = D - d_p
    ok = has_depth & (np.abs(est) < np.sqrt(3.0) * voxel_size)
    reason[has_depth & ~ok] = Invalid.OCCLUDED
    reason[ok] = 0
    s[ok] = est[ok]
    return s, reason


def estimate_vertex_prior(vertex_world, frame: Frame, intr: CameraIntrinsics, voxel_size: float):
    """Single-vertex estimate: ``(s_curr, None)`` when valid, ``(None, Invalid)`` otherwise."""
    s, reason = estimate_priors(np.asarray(vertex_world)[None], frame, intr, voxel_size)
    if reason[0]:
        return None, Invalid(int(reason[0]))
    return float(s[0]), None


def fuse_vertex(vd: VertexData, s_curr: float, n_curr: float) -> VertexData:
    if n_curr < 1:
        raise ValueError("n_curr must be at least 1")
    n = vd.update_weight + n_curr
    s = (vd.sdf_prior * vd.update_weight + s_curr * n_curr) / n
    return VertexData(vd.feature, s, n)


def receiving_vertices(vmap: HybridVoxelMap, frame: Frame, intr: CameraIntrinsics):
    """Vertex ids of allocated leaves hit by the frame's points, with the number of
    such leaves sharing each vertex."""
    coords, _ = vmap.point_counts(frame, intr)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    leaves = vmap.lookup_leaves(coords)
    leaves = leaves[leaves >= 0]
    if len(leaves) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    verts = vmap.leaf_vertices[leaves].reshape(-1)
    return np.unique(verts, return_counts=True)


def frame_estimates(vmap: HybridVoxelMap, frame: Frame, intr: CameraIntrinsics) -> list[PriorEstimate]:
    vids, n_curr = receiving_vertices(vmap, frame, intr)
    s, reason = estimate_priors(vmap.vertex_world(vids), frame, intr, vmap.voxel_size)
    coords = vmap.vertex_coords[vids]
    return [
        PriorEstimate(tuple(int(x) for x in coords[i]), float(s[i]), int(n_curr[i]))
        for i in np.flatnonzero(reason == 0)
    ]


def integrate_frame(vmap: HybridVoxelMap, frame: Frame, intr: CameraIntrinsics) -> int:
    """Fuse this frame's prior estimates into every vertex of every point-receiving leaf.

    All estimates are computed before any vertex is written. Returns the number of
    vertices updated.
    """
    vids, n_curr = receiving_vertices(vmap, frame, intr)
    if len(vids) == 0:
        return 0
    s, reason = estimate_priors(vmap.vertex_world(vids), frame, intr, vmap.voxel_size)
    ok = reason == 0
    vids, n_curr, s = vids[ok], n_curr[ok].astype(np.float64), s[ok]
    w_old = vmap._weight[vids]
    w_new = w_old + n_curr
    vmap._sdf[vids] = (vmap._sdf[vids] * w_old + s * n_curr) / w_new
    vmap._weight[vids] = w_new
    return int(ok.sum())

