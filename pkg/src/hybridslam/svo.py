"""Sparse hybrid voxel map.

Leaf voxels of edge ``voxel_size`` are allocated on demand. Each leaf references its
8 corner vertices; a vertex shared between neighbouring leaves is stored once and
holds a feature vector, an SDF prior and a fusion weight.

A leaf ``(ix, iy, iz)`` spans ``[i * s, (i + 1) * s)`` per axis. Its corner ``k``
(0..7) is the vertex ``(ix + (k & 1), iy + (k >> 1 & 1), iz + (k >> 2 & 1))``.

Occupancy is also tracked per octree level: level ``l`` holds the coordinates
``leaf >> l`` of every allocated leaf, for ``l = 1 .. n_levels``. Level
``n_levels`` is the root-block level, so one root block spans ``2**n_levels``
leaves per axis and root blocks tile space without bound.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .geometry import CameraIntrinsics, Frame, backproject_depth

CORNER_OFFSETS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)


class UnallocatedError(LookupError):
    pass


@dataclass(frozen=True)
class VertexData:
    feature: np.ndarray
    sdf_prior: float = 0.0
    update_weight: float = 0.0


def trilinear_weights(frac: np.ndarray) -> np.ndarray:
    """Corner weights (..., 8) for in-cell coordinates ``frac`` (..., 3) in [0, 1]."""
    f = frac[..., None, :]
    w = np.where(CORNER_OFFSETS == 1, f, 1.0 - f)
    return w.prod(axis=-1)


class HybridVoxelMap:
    def __init__(
        self,
        voxel_size: float = 0.2,
        feature_dim: int = 16,
        n_levels: int = 8,
        alloc_threshold: int = 5,
        feature_init: float = 1e-2,
        seed: int = 0,
    ):
        self.voxel_size = float(voxel_size)
        self.feature_dim = int(feature_dim)
        self.n_levels = int(n_levels)
        self.alloc_threshold = int(alloc_threshold)
        self.feature_init = float(feature_init)
        self.rng = np.random.default_rng(seed)

        self.leaf_index: dict[tuple[int, int, int], int] = {}
        self.leaf_coords = np.zeros((0, 3), dtype=np.int64)
        self.leaf_vertices = np.zeros((0, 8), dtype=np.int64)

        self.vertex_index: dict[tuple[int, int, int], int] = {}
        self._nv = 0
        self._vcoords = np.zeros((64, 3), dtype=np.int64)
        self._features = np.zeros((64, self.feature_dim))
        self._sdf = np.zeros(64)
        self._weight = np.zeros(64)

        self.level_masks: list[set] = [set() for _ in range(self.n_levels + 1)]

        self._grid = np.full((0, 0, 0), -1, dtype=np.int64)
        self._grid_lo = np.zeros(3, dtype=np.int64)

    # ------------------------------------------------------------------ storage
    @property
    def n_leaves(self) -> int:
        return len(self.leaf_index)

    @property
    def n_vertices(self) -> int:
        return self._nv

    @property
    def features(self) -> np.ndarray:
        return self._features[: self._nv]

    @property
    def sdf_prior(self) -> np.ndarray:
        return self._sdf[: self._nv]

    @property
    def update_weight(self) -> np.ndarray:
        return self._weight[: self._nv]

    @property
    def vertex_coords(self) -> np.ndarray:
        return self._vcoords[: self._nv]

    def vertex_data(self, coord) -> VertexData:
        i = self.vertex_index[tuple(int(c) for c in coord)]
        return VertexData(self._features[i].copy(), float(self._sdf[i]), float(self._weight[i]))

    def set_vertex_data(self, coord, vd: VertexData):
        i = self.vertex_index[tuple(int(c) for c in coord)]
        self._features[i] = vd.feature
        self._sdf[i] = vd.sdf_prior
        self._weight[i] = vd.update_weight

    def vertex_world(self, idx=None) -> np.ndarray:
        c = self.vertex_coords if idx is None else self._vcoords[idx]
        return c.astype(np.float64) * self.voxel_size

    def _grow_vertices(self, need: int):
        cap = len(self._sdf)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)

        def grow(a):
            out = np.zeros((new_cap,) + a.shape[1:], dtype=a.dtype)
            out[: len(a)] = a
            return out

        self._vcoords = grow(self._vcoords)
        self._features = grow(self._features)
        self._sdf = grow(self._sdf)
        self._weight = grow(self._weight)

    def _add_vertex(self, coord: tuple) -> int:
        idx = self.vertex_index.get(coord)
        if idx is not None:
            return idx
        idx = self._nv
        self._grow_vertices(idx + 1)
        self._vcoords[idx] = coord
        self._features[idx] = self.rng.uniform(-self.feature_init, self.feature_init, self.feature_dim)
        self._sdf[idx] = 0.0
        self._weight[idx] = 0.0
        self.vertex_index[coord] = idx
        self._nv += 1
        return idx

    def allocate(self, coords) -> list[tuple[int, int, int]]:
        """Allocate leaves at integer ``coords`` (sorted for reproducible vertex order)."""
        new = sorted({tuple(int(x) for x in c) for c in np.asarray(coords, dtype=np.int64).reshape(-1, 3)} - self.leaf_index.keys())
        if not new:
            return []
        verts = np.empty((len(new), 8), dtype=np.int64)
        for n, c in enumerate(new):
            self.leaf_index[c] = len(self.leaf_coords) + n
            for k, off in enumerate(CORNER_OFFSETS):
                verts[n, k] = self._add_vertex((c[0] + int(off[0]), c[1] + int(off[1]), c[2] + int(off[2])))
            for lvl in range(1, self.n_levels + 1):
                self.level_masks[lvl].add((c[0] >> lvl, c[1] >> lvl, c[2] >> lvl))
        self.leaf_coords = np.concatenate([self.leaf_coords, np.array(new, dtype=np.int64)])
        self.leaf_vertices = np.concatenate([self.leaf_vertices, verts])
        self._update_grid(np.array(new, dtype=np.int64))
        return new

    def _update_grid(self, new_coords: np.ndarray):
        lo, hi = new_coords.min(0), new_coords.max(0) + 1
        g_lo, g_hi = self._grid_lo, self._grid_lo + np.array(self._grid.shape)
        if self._grid.size == 0 or np.any(lo < g_lo) or np.any(hi > g_hi):
            all_c = self.leaf_coords
            margin = 4
            n_lo = all_c.min(0) - margin
            n_hi = all_c.max(0) + 1 + margin
            self._grid = np.full(tuple(n_hi - n_lo), -1, dtype=np.int64)
            self._grid_lo = n_lo
            idx = all_c - n_lo
            self._grid[idx[:, 0], idx[:, 1], idx[:, 2]] = np.arange(len(all_c))
        else:
            idx = new_coords - g_lo
            self._grid[idx[:, 0], idx[:, 1], idx[:, 2]] = [self.leaf_index[tuple(c)] for c in new_coords.tolist()]

    def lookup_leaves(self, coords: np.ndarray) -> np.ndarray:
        """Leaf indices for integer coords (..., 3); -1 where unallocated."""
        coords = np.asarray(coords, dtype=np.int64)
        out = np.full(coords.shape[:-1], -1, dtype=np.int64)
        if self._grid.size == 0:
            return out
        rel = coords - self._grid_lo
        inside = np.all((rel >= 0) & (rel < np.array(self._grid.shape)), axis=-1)
        r = rel[inside]
        out[inside] = self._grid[r[:, 0], r[:, 1], r[:, 2]]
        return out

    def is_allocated(self, coord) -> bool:
        return tuple(int(c) for c in coord) in self.leaf_index

    def leaf_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    def bounds(self):
        """World-space AABB of all allocated leaves, or None."""
        if self.n_leaves == 0:
            return None
        return self.leaf_coords.min(0) * self.voxel_size, (self.leaf_coords.max(0) + 1) * self.voxel_size

    # --------------------------------------------------------------- allocation
    def frame_points(self, frame: Frame, intr: CameraIntrinsics) -> np.ndarray:
        pts_cam, _ = backproject_depth(frame.depth, intr)
        return frame.pose.apply(pts_cam)

    def point_counts(self, frame: Frame, intr: CameraIntrinsics):
        """Unique leaf coords hit by the frame's back-projected points and their counts."""
        pts = self.frame_points(frame, intr)
        if len(pts) == 0:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.unique(self.leaf_of(pts), axis=0, return_counts=True)

    def allocate_from_frame(self, frame: Frame, intr: CameraIntrinsics) -> list[tuple[int, int, int]]:
        coords, counts = self.point_counts(frame, intr)
        return self.allocate(coords[counts >= self.alloc_threshold])

    # ------------------------------------------------------------ interpolation
    def locate(self, points: np.ndarray):
        """Leaf index (-1 if unallocated), corner vertex ids and weights for points (N, 3)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        scaled = points / self.voxel_size
        cell = np.floor(scaled)
        frac = scaled - cell
        leaf = self.lookup_leaves(cell.astype(np.int64))
        ok = leaf >= 0
        verts = np.zeros((len(points), 8), dtype=np.int64)
        verts[ok] = self.leaf_vertices[leaf[ok]]
        return leaf, verts, trilinear_weights(frac)

    def trilerp_batch(self, points: np.ndarray):
        """Vectorized trilerp. Returns ``(features, sdf, valid, verts, weights)``."""
        leaf, verts, w = self.locate(points)
        valid = leaf >= 0
        feats = np.einsum("nk,nkd->nd", w, self._features[verts])
        sdf = np.einsum("nk,nk->n", w, self._sdf[verts])
        feats[~valid] = 0.0
        sdf[~valid] = 0.0
        return feats, sdf, valid, verts, w

    def trilerp(self, p):
        """Interpolated ``(feature, sdf_coarse)`` at world point ``p``; None when unallocated."""
        feats, sdf, valid, _, _ = self.trilerp_batch(np.asarray(p, dtype=np.float64)[None])
        if not valid[0]:
            return None
        return feats[0], float(sdf[0])

    def vertex_gradient_scatter(self, p, grad_feature, grad_sdf: float = 0.0):
        """Split an upstream gradient at ``p`` onto the 8 corner vertices.

        Returns ``(vertex_ids (8,), grad_features (8, D), grad_sdf (8,))``.
        """
        leaf, verts, w = self.locate(np.asarray(p, dtype=np.float64)[None])
        if leaf[0] < 0:
            raise UnallocatedError(f"no leaf voxel allocated at {p}")
        return verts[0], w[0][:, None] * np.asarray(grad_feature, dtype=np.float64)[None, :], w[0] * grad_sdf

    def scatter_batch(self, verts, weights, grad_features=None, grad_sdf=None):
        """Accumulate per-point upstream gradients into dense per-vertex arrays."""
        nv = self._nv
        flat = verts.reshape(-1)
        out_f = out_s = None
        if grad_features is not None:
            rows = np.repeat(np.arange(len(verts)), verts.shape[1])
            spread = sparse.csr_matrix((weights.reshape(-1), (flat, rows)), shape=(nv, len(verts)))
            out_f = np.asarray(spread @ np.asarray(grad_features, dtype=np.float64))
        if grad_sdf is not None:
            out_s = np.bincount(flat, weights=(weights * grad_sdf[:, None]).reshape(-1), minlength=nv)
        return out_f, out_s

    # -------------------------------------------------------- ray traversal
    def _coarse_empty_level(self, cell) -> int:
        """Highest level whose ancestor cell is empty (0 if the leaf level is the first empty)."""
        x, y, z = cell
        for lvl in range(self.n_levels, 0, -1):
            if (x >> lvl, y >> lvl, z >> lvl) not in self.level_masks[lvl]:
                return lvl
        return 0

    def ray_voxel_intersect(self, origin, direction, max_range: float, hierarchical: bool = True):
        """Allocated leaves pierced by the ray within ``[0, max_range]``.

        Returns a list of ``(coord, t_entry, t_exit)`` with strictly increasing entries.
        With ``hierarchical=True`` empty octree cells are skipped in one step; the
        result is identical to plain leaf-level DDA.
        """
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        s = self.voxel_size
        out = []
        if self.n_leaves == 0 or max_range <= 0:
            return out
        step = [1 if d[a] > 0 else -1 for a in range(3)]
        cell = [int(np.floor(o[a] / s)) for a in range(3)]

        def t_plane(a, plane):
            return (plane * s - o[a]) / d[a]

        def next_planes(cell):
            tm = []
            for a in range(3):
                if d[a] == 0:
                    tm.append(np.inf)
                else:
                    tm.append(t_plane(a, cell[a] + 1 if d[a] > 0 else cell[a]))
            return tm

        t = 0.0
        t_max = next_planes(cell)
        while t <= max_range:
            key = (cell[0], cell[1], cell[2])
            if key in self.leaf_index:
                t_exit = min(min(t_max), max_range)
                if t_exit > t or t == 0.0:
                    out.append((key, t, t_exit))
            elif hierarchical:
                lvl = self._coarse_empty_level(key)
                if lvl > 0:
                    size = 1 << lvl
                    exit_t, exit_axis = np.inf, -1
                    for a in range(3):
                        if d[a] == 0:
                            continue
                        base = (cell[a] >> lvl) * size
                        plane = base + size if d[a] > 0 else base
                        ta = t_plane(a, plane)
                        if ta < exit_t:
                            exit_t, exit_axis = ta, a
                    if exit_t > max_range:
                        break
                    lo = [(cell[a] >> lvl) * size for a in range(3)]
                    pos = o + exit_t * d
                    new = []
                    for a in range(3):
                        if a == exit_axis:
                            new.append(lo[a] + size if d[a] > 0 else lo[a] - 1)
                        else:
                            i = int(np.floor(pos[a] / s))
                            new.append(min(max(i, lo[a]), lo[a] + size - 1))
                    cell = new
                    t = exit_t
                    t_max = next_planes(cell)
                    continue
            a = int(np.argmin(t_max))
            t = t_max[a]
            cell[a] += step[a]
            t_max[a] = t_plane(a, cell[a] + 1 if d[a] > 0 else cell[a])
        return out

    # ------------------------------------------------------------- snapshots
    def copy(self) -> "HybridVoxelMap":
        buf = io.BytesIO()
        write_snapshot(buf, self)
        buf.seek(0)
        m, _ = read_snapshot(buf)
        m.rng = np.random.default_rng()
        m.rng.bit_generator.state = self.rng.bit_generator.state
        m.alloc_threshold = self.alloc_threshold
        m.feature_init = self.feature_init
        return m

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.leaf_coords, self.vertex_coords, self.features, self.sdf_prior, self.update_weight):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# Snapshot layout (little endian):
#   magic    8 bytes  b"HSVOMAP\0"
#   version  u32      (currently 1)
#   voxel_size f64, feature_dim u32, n_levels u32
#   n_leaves u64, leaf coords i64[n_leaves, 3]
#   n_vertices u64, vertex coords i64[n, 3], features f64[n, D], sdf_prior f64[n], update_weight f64[n]
#   has_decoder u8; if 1: n_arrays u32, then per array: name_len u32, name utf8, ndim u32, shape u64[ndim], data f64
SNAPSHOT_MAGIC = b"HSVOMAP\0"
SNAPSHOT_VERSION = 1


def _write_array(f, a, dtype):
    f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read_array(f, dtype, shape):
    n = int(np.prod(shape)) if len(shape) else 1
    data = f.read(n * np.dtype(dtype).itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def write_snapshot(f, vmap: HybridVoxelMap, decoder_params: dict | None = None):
    f.write(SNAPSHOT_MAGIC)
    f.write(struct.pack("<IdII", SNAPSHOT_VERSION, vmap.voxel_size, vmap.feature_dim, vmap.n_levels))
    f.write(struct.pack("<Q", vmap.n_leaves))
    _write_array(f, vmap.leaf_coords, "<i8")
    f.write(struct.pack("<Q", vmap.n_vertices))
    _write_array(f, vmap.vertex_coords, "<i8")
    _write_array(f, vmap.features, "<f8")
    _write_array(f, vmap.sdf_prior, "<f8")
    _write_array(f, vmap.update_weight, "<f8")
    if decoder_params is None:
        f.write(struct.pack("<B", 0))
        return
    f.write(struct.pack("<BI", 1, len(decoder_params)))
    for name, arr in decoder_params.items():
        arr = np.asarray(arr)
        nb = name.encode()
        f.write(struct.pack("<I", len(nb)) + nb)
        f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        _write_array(f, arr, "<f8")


def read_snapshot(f):
    """Returns ``(map, decoder_params or None)``."""
    if f.read(8) != SNAPSHOT_MAGIC:
        raise ValueError("not a voxel map snapshot")
    version, voxel_size, dim, n_levels = struct.unpack("<IdII", f.read(20))
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    vmap = HybridVoxelMap(voxel_size=voxel_size, feature_dim=dim, n_levels=n_levels)
    (n_leaves,) = struct.unpack("<Q", f.read(8))
    leaves = _read_array(f, "<i8", (n_leaves, 3))
    (nv,) = struct.unpack("<Q", f.read(8))
    vcoords = _read_array(f, "<i8", (nv, 3))
    feats = _read_array(f, "<f8", (nv, dim))
    sdf = _read_array(f, "<f8", (nv,))
    weight = _read_array(f, "<f8", (nv,))

    # rebuild in the stored order so indices match
    vmap._grow_vertices(max(nv, 1))
    vmap._vcoords[:nv] = vcoords
    vmap._features[:nv] = feats
    vmap._sdf[:nv] = sdf
    vmap._weight[:nv] = weight
    vmap._nv = int(nv)
    vmap.vertex_index = {tuple(c): i for i, c in enumerate(vcoords.tolist())}
    vmap.leaf_index = {tuple(c): i for i, c in enumerate(leaves.tolist())}
    vmap.leaf_coords = leaves
    vmap.leaf_vertices = np.array(
        [[vmap.vertex_index[(c[0] + o[0], c[1] + o[1], c[2] + o[2])] for o in CORNER_OFFSETS.tolist()] for c in leaves.tolist()],
        dtype=np.int64,
    ).reshape(-1, 8)
    for c in leaves.tolist():
        for lvl in range(1, n_levels + 1):
            vmap.level_masks[lvl].add((c[0] >> lvl, c[1] >> lvl, c[2] >> lvl))
    if n_leaves:
        vmap._update_grid(leaves)

    (has_dec,) = struct.unpack("<B", f.read(1))
    params = None
    if has_dec:
        (n_arr,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n_arr):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            params[name] = _read_array(f, "<f8", shape)
    return vmap, params


def save_snapshot(path, vmap: HybridVoxelMap, decoder_params: dict | None = None):
    with open(path, "wb") as f:
        write_snapshot(f, vmap, decoder_params)


def load_snapshot(path):
    with open(path, "rb") as f:
        return read_snapshot(f)
