"""Camera model, SE(3) poses and pixel/point projection.

Poses are world-from-camera: ``x_world = R @ x_cam + t``.
Tangent vectors are ordered ``(rho, phi)``: translation part first, rotation second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def pixel_rays(self, u, v) -> np.ndarray:
        """Camera-frame ray directions with unit z component for pixel coords (u, v)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_line(self) -> str:
        return (
            f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} "
            f"{self.width} {self.height} {self.depth_scale!r}"
        )

    @classmethod
    def from_line(cls, line: str) -> "CameraIntrinsics":
        fx, fy, cx, cy, w, h, ds = line.split()
        return cls(float(fx), float(fy), float(cx), float(cy), int(w), int(h), float(ds))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-8:
        # second-order Taylor keeps orthonormality to ~1e-16 at this scale
        return np.eye(3) + W + 0.5 * W @ W
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * W @ W


def so3_log(R) -> np.ndarray:
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi: recover the axis from the symmetric part
        M = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def _left_jacobian(phi) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    B = (1.0 - np.cos(theta)) / theta**2
    C = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + B * W + C * W @ W


def _left_jacobian_inv(phi) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    D = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * W + D * W @ W


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform, world-from-camera."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Map points (..., 3) from the source frame into the target frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.linalg.norm(R.T @ R - np.eye(3)) < tol
            and np.linalg.det(R) > 0
            and np.all(np.isfinite(self.translation))
        )

    def retract(self, xi) -> "Pose":
        """Left perturbation ``exp(xi) * self``."""
        return se3_exp(xi) @ self

    def quaternion_xyzw(self) -> np.ndarray:
        from scipy.spatial.transform import Rotation

        return Rotation.from_matrix(self.rotation).as_quat()

    @classmethod
    def from_quaternion_xyzw(cls, q, t) -> "Pose":
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_quat(q).as_matrix(), t)

    def __repr__(self):
        return f"Pose(t={np.array2string(self.translation, precision=4)}, rotvec={np.array2string(so3_log(self.rotation), precision=4)})"


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = _left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def project(point_cam, intr: CameraIntrinsics):
    """Pinhole projection of a camera-frame point. Returns ``(pixel, depth)``."""
    x, y, z = np.asarray(point_cam, dtype=np.float64)
    if not z > 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy]), float(z)


def backproject(pixel, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = pixel
    return np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics):
    """Vectorized projection; entries with z <= 0 come back as nan pixels."""
    z = points_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(z > 0, z, np.nan)
        u = intr.fx * points_cam[..., 0] / zs + intr.cx
        v = intr.fy * points_cam[..., 1] / zs + intr.cy
    return np.stack([u, v], axis=-1), z


def backproject_depth(depth: np.ndarray, intr: CameraIntrinsics, pixels=None):
    """Back-project valid depth pixels into camera-frame points.

    Returns ``(points, (v, u))``; with ``pixels=None`` every pixel with depth > 0 is used.
    """
    if pixels is None:
        v, u = np.nonzero(depth > 0)
    else:
        v, u = pixels
    d = depth[v, u].astype(np.float64)
    pts = intr.pixel_rays(u, v) * d[:, None]
    return pts, (v, u)


def in_image(pixels: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel centers sit at integer coordinates; the image spans [-0.5, size - 0.5)."""
    u, v = pixels[..., 0], pixels[..., 1]
    with np.errstate(invalid="ignore"):
        return (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5)


def warp_points(pixels, depth_obs, pose_c: Pose, pose_w: Pose, intr: CameraIntrinsics):
    """Vectorized warp of pixels with depth from camera c into camera w.

    Returns ``(q_w, d_w, valid)`` where ``valid`` marks points in front of camera w
    that land inside its image.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depth_obs = np.asarray(depth_obs, dtype=np.float64)
    pts_c = intr.pixel_rays(pixels[..., 0], pixels[..., 1]) * depth_obs[..., None]
    pts_w = pose_w.apply_inverse(pose_c.apply(pts_c))
    q_w, d_w = project_points(pts_w, intr)
    valid = (d_w > 0) & in_image(q_w, intr)
    return q_w, d_w, valid


def warp_pixel(q_c, depth_obs: float, pose_c: Pose, pose_w: Pose, intr: CameraIntrinsics):
    """Warp one pixel into camera w. Returns ``(q_w, d_w)`` or ``None`` when out of view."""
    if not depth_obs > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth_obs}")
    q_w, d_w, valid = warp_points(np.asarray(q_c, dtype=np.float64)[None], np.array([depth_obs]), pose_c, pose_w, intr)
    if not valid[0]:
        return None
    return q_w[0], float(d_w[0])


@dataclass
class Frame:
    id: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    pose: Pose = field(default_factory=Pose.identity)
    is_keyframe: bool = False

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float32)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.color.shape[:2] != self.depth.shape or self.color.shape[-1] != 3:
            raise ValueError("color must be HxWx3 and match depth HxW")
        if np.any(self.depth < 0):
            raise ValueError("depth values must be non-negative")

    def check(self, intr: CameraIntrinsics):
        if self.depth.shape != (intr.height, intr.width):
            raise ValueError(f"frame {self.id} is {self.depth.shape}, intrinsics say {(intr.height, intr.width)}")

    def valid_pixels(self):
        return np.nonzero(self.depth > 0)
