"""Surface extraction from the hybrid map by marching cubes over allocated leaves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from . import decoder
from .svo import HybridVoxelMap


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) world
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray  # (V, 3) in [0, 1]

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-15)


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))


def query_sdf(vmap: HybridVoxelMap, params: dict | None, points: np.ndarray, chunk: int = 65536, with_color: bool = False, observed_only: bool = False):
    """Full SDF (prior + residual) and optionally colour at world points; NaN off-map.

    With ``params`` None the residual is taken as zero and colour as mid gray. With
    ``observed_only`` points whose leaf has a never-fused corner are also NaN, since
    such a corner holds a placeholder prior of 0 that reads as a surface.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sdf = np.full(len(points), np.nan)
    color = np.full((len(points), 3), 0.5)
    for lo in range(0, len(points), chunk):
        sl = slice(lo, lo + chunk)
        E, s_c, valid, verts, _ = vmap.trilerp_batch(points[sl])
        if observed_only:
            valid = valid & np.all(vmap._weight[verts] > 0, axis=1)
        s = s_c
        if params is not None and valid.any():
            c, s_res, _ = decoder.forward(params, E[valid], dtype=np.float32)
            s = s_c.copy()
            s[valid] += s_res
            if with_color:
                color[lo : lo + len(valid)][valid] = c
        sdf[sl] = np.where(valid, s, np.nan)
    return (sdf, color) if with_color else sdf


def extract_mesh(vmap: HybridVoxelMap, params: dict | None = None, resolution: float | None = None, observed_only: bool = True) -> Mesh:
    """Zero level set of ``s_prior + s_residual`` sampled only inside allocated leaves.

    By default leaves touching unfused vertices are skipped (see ``query_sdf``).

    Grid points sit at cell centres of a ``resolution`` lattice aligned to the leaf grid,
    so none falls on a leaf boundary. ``resolution`` defaults to voxel_size / 8.
    """
    b = vmap.bounds()
    if b is None:
        return empty_mesh()
    res = vmap.voxel_size / 8 if resolution is None else float(resolution)
    lo, hi = b
    shape = np.maximum(np.round((hi - lo) / res).astype(np.int64), 1)
    axes = [lo[a] + (np.arange(shape[a]) + 0.5) * res for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = query_sdf(vmap, params, grid, observed_only=observed_only).reshape(tuple(shape))
    mask = np.isfinite(sdf)
    if not mask.any() or np.nanmin(sdf) > 0 or np.nanmax(sdf) < 0 or min(shape) < 2:
        return empty_mesh()
    vol = np.where(mask, sdf, 1.0)
    # skimage gates each cube on the mask at its upper corner; require all eight corners valid
    # so the fill value never forms faces
    cube = np.zeros_like(mask)
    cube[1:, 1:, 1:] = True
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cube[1:, 1:, 1:] &= mask[dx : dx + shape[0] - 1, dy : dy + shape[1] - 1, dz : dz + shape[2] - 1]
    try:
        verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(res, res, res), mask=cube)
    except (ValueError, RuntimeError):
        return empty_mesh()
    if len(faces) == 0:
        return empty_mesh()
    verts = verts + lo + 0.5 * res
    _, col = query_sdf(vmap, params, verts, with_color=True)
    return Mesh(verts, faces.astype(np.int64), col)


def write_ply(path, mesh: Mesh):
    """ASCII PLY with per-vertex 8-bit colour."""
    rgb = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype(np.int64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, c in zip(mesh.vertices, rgb):
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path) -> Mesh:
    with open(path) as fh:
        nv = nf = 0
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith("element face"):
                nf = int(line.split()[-1])
            elif line == "end_header":
                break
        vs = np.array([fh.readline().split() for _ in range(nv)], dtype=np.float64).reshape(-1, 6)
        fs = np.array([fh.readline().split()[1:4] for _ in range(nf)], dtype=np.int64).reshape(-1, 3)
    return Mesh(vs[:, :3], fs, vs[:, 3:] / 255.0)
