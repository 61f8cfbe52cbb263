"""Analytic indoor scenes and camera paths for generating RGB-D sequences with exact ground truth.

Depth comes from sphere tracing the scene SDF, colour from a textured albedo times
Lambert shading under a fixed directional light (view independent).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Frame, Pose


class TrajectoryError(ValueError):
    pass


def sd_box(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


@dataclass
class Primitive:
    kind: str  # "room" | "box" | "sphere" | "plane"
    center: np.ndarray
    size: np.ndarray  # half extents for boxes/room, radius for spheres, normal for planes
    albedo: np.ndarray

    def sdf(self, p):
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "room":
            return -sd_box(p, c, np.asarray(self.size, dtype=np.float64))
        if self.kind == "box":
            return sd_box(p, c, np.asarray(self.size, dtype=np.float64))
        if self.kind == "sphere":
            return np.linalg.norm(p - c, axis=-1) - float(np.asarray(self.size).reshape(-1)[0])
        if self.kind == "plane":
            n = np.asarray(self.size, dtype=np.float64)
            n = n / np.linalg.norm(n)
            return (p - c) @ n
        raise ValueError(f"unknown primitive {self.kind}")


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, 0.8]))
    ambient: float = 0.35
    texture_scale: float = 0.35

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.min(np.stack([pr.sdf(p) for pr in self.primitives], axis=0), axis=0)

    def closest(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.argmin(np.stack([np.abs(pr.sdf(p)) for pr in self.primitives], axis=0), axis=0)

    def normal(self, p, h: float = 1e-5) -> np.ndarray:
        g = np.stack(
            [self.sdf(p + h * e) - self.sdf(p - h * e) for e in np.eye(3)],
            axis=-1,
        )
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def albedo(self, p) -> np.ndarray:
        idx = self.closest(p)
        base = np.stack([np.asarray(pr.albedo, dtype=np.float64) for pr in self.primitives])[idx]
        k = 2 * np.pi / self.texture_scale
        tex = (np.sin(k * p[..., 0]) + np.sin(0.8 * k * p[..., 1] + 1.0) + np.sin(1.3 * k * p[..., 2] + 2.0)) / 3.0
        return base * (0.7 + 0.3 * tex[..., None])

    def shade(self, p) -> np.ndarray:
        n = self.normal(p)
        light = np.asarray(self.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lam = np.abs(n @ light)
        return np.clip(self.albedo(p) * (self.ambient + (1 - self.ambient) * lam)[..., None], 0.0, 1.0)

    def trace(self, origins, dirs, max_dist: float = 20.0, iters: int = 200, eps: float = 1e-7):
        """Sphere-trace unit rays; returns hit distance (inf on miss).

        Rays still unconverged after ``iters`` steps (grazing silhouettes) count as misses.
        """
        t = np.zeros(len(origins))
        alive = np.ones(len(origins), dtype=bool)
        for _ in range(iters):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            d = self.sdf(origins[idx] + t[idx, None] * dirs[idx])
            t[idx] += d
            done = np.abs(d) < eps
            gone = t[idx] > max_dist
            alive[idx[done | gone]] = False
        t[alive | (t > max_dist)] = np.inf
        return t


def default_room() -> SyntheticScene:
    """4 x 4 x 2.6 m room with a box and a sphere; world z is up."""
    return SyntheticScene(
        [
            Primitive("room", np.array([0.0, 0.0, 1.3]), np.array([2.0, 2.0, 1.3]), np.array([0.85, 0.8, 0.7])),
            Primitive("box", np.array([1.1, 0.9, 0.4]), np.array([0.35, 0.3, 0.4]), np.array([0.3, 0.5, 0.8])),
            Primitive("box", np.array([-1.2, 1.3, 0.6]), np.array([0.25, 0.25, 0.6]), np.array([0.7, 0.3, 0.3])),
            Primitive("sphere", np.array([-0.9, -1.0, 0.6]), np.array([0.45]), np.array([0.3, 0.75, 0.35])),
            Primitive("box", np.array([0.9, -1.2, 1.2]), np.array([0.3, 0.2, 0.25]), np.array([0.8, 0.7, 0.2])),
        ]
    )


def plane_scene(distance: float = 1.0) -> SyntheticScene:
    """Single wall facing -y at ``y = distance``."""
    return SyntheticScene([Primitive("plane", np.array([0.0, distance, 0.0]), np.array([0.0, -1.0, 0.0]), np.array([0.8, 0.6, 0.4]))])


def sphere_scene(center=(0.0, 1.5, 0.0), radius: float = 0.5) -> SyntheticScene:
    return SyntheticScene(
        [
            Primitive("sphere", np.asarray(center, dtype=np.float64), np.array([radius]), np.array([0.7, 0.5, 0.3])),
        ]
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose with +z toward ``target`` and image v pointing down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def circle_trajectory(n: int, center=(0.0, 0.0, 1.3), radius: float = 0.25, look_dist: float = 2.0, yaw0: float = 0.6, yaw_amp: float = 0.6, turns: float = 1.0) -> list[Pose]:
    """Camera on a small horizontal circle, heading sweeping +-``yaw_amp`` around ``yaw0``.

    The path closes after ``turns`` revolutions, so late frames revisit early views.
    """
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n):
        a = 2 * np.pi * turns * i / max(n, 1)
        eye = c + np.array([radius * np.cos(a), radius * np.sin(a), 0.05 * np.sin(2 * a)])
        yaw = yaw0 + yaw_amp * np.sin(a)
        target = eye + look_dist * np.array([np.cos(yaw), np.sin(yaw), -0.15])
        poses.append(look_at(eye, target))
    return poses


def figure_eight_trajectory(n: int, center=(0.0, 0.0, 1.3), size: float = 0.6, look_dist: float = 2.0, yaw0: float = 0.6, yaw_amp: float = 1.2) -> list[Pose]:
    """Lemniscate path with a wide heading sweep; the crossing and the closing leg
    revisit earlier viewpoints."""
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n):
        a = 2 * np.pi * i / max(n, 1)
        eye = c + np.array([size * np.sin(a), 0.5 * size * np.sin(2 * a), 0.05 * np.sin(3 * a)])
        yaw = yaw0 + yaw_amp * np.sin(a)
        target = eye + look_dist * np.array([np.cos(yaw), np.sin(yaw), -0.15])
        poses.append(look_at(eye, target))
    return poses


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    f = 0.75 * width
    return CameraIntrinsics(f, f, width / 2 - 0.5, height / 2 - 0.5, width, height, 1000.0)


def render_view(scene: SyntheticScene, pose: Pose, intr: CameraIntrinsics, max_depth: float = 10.0):
    """Noise-free (color, depth) images; depth is camera z, 0 where nothing is hit."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    d_cam = intr.pixel_rays(u.ravel(), v.ravel())
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t = scene.trace(origins, dirs)
    hit = np.isfinite(t)
    z = np.where(hit, t * d_cam[:, 2], 0.0)
    z[z > max_depth] = 0.0
    color = np.zeros((len(t), 3))
    if hit.any():
        color[hit] = scene.shade(origins[hit] + t[hit, None] * dirs[hit])
    return color.reshape(intr.height, intr.width, 3), z.reshape(intr.height, intr.width)


def render_frames(scene: SyntheticScene, poses: list[Pose], intr: CameraIntrinsics, noise: float = 0.0, seed: int = 0, fps: float = 30.0, quantize: bool = True) -> list[Frame]:
    """Frames carrying ground-truth poses; depth noise is Gaussian with std ``noise`` meters.

    With ``quantize`` the images go through the same 8-bit colour and millimetre depth
    quantization as the on-disk format.
    """
    rng = np.random.default_rng(seed)
    frames = []
    for i, pose in enumerate(poses):
        if scene.sdf(pose.translation[None])[0] <= 0.2:
            raise TrajectoryError(f"camera {i} is within 0.2 m of a surface")
        color, depth = render_view(scene, pose, intr)
        if noise > 0:
            valid = depth > 0
            depth = np.where(valid, np.maximum(depth + rng.normal(0.0, noise, depth.shape), 0.0), 0.0)
        if quantize:
            color = np.round(color * 255.0) / 255.0
            depth = np.round(depth * intr.depth_scale) / intr.depth_scale
        frames.append(Frame(i, i / fps, color, depth, pose))
    return frames
