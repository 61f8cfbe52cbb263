"""Absolute trajectory error after rigid least-squares alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose


@dataclass
class TrajectoryReport:
    errors: np.ndarray  # per-frame aligned translation error (m)
    rmse_cm: float
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def rmse(self) -> float:
        return self.rmse_cm / 100.0


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Rotation R and translation t minimising ``sum |R src_i + t - dst_i|^2`` (Kabsch)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    return R, mu_d - R @ mu_s


def _positions(traj) -> np.ndarray:
    return np.array([p.translation if isinstance(p, Pose) else np.asarray(p, dtype=np.float64) for p in traj]).reshape(-1, 3)


def evaluate_ate(estimated, ground_truth) -> TrajectoryReport:
    """Align ``estimated`` onto ``ground_truth`` (poses or positions) and report the RMSE."""
    est = _positions(estimated)
    gt = _positions(ground_truth)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        return TrajectoryReport(np.zeros(0), 0.0, np.eye(3), np.zeros(3))
    if len(est) < 3:
        R, t = np.eye(3), gt.mean(0) - est.mean(0)
    else:
        R, t = rigid_align(est, gt)
    err = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return TrajectoryReport(err, float(100.0 * np.sqrt(np.mean(err**2))), R, t)


def associate(t_est, t_gt, max_dt: float = 0.02):
    """Pair each estimated timestamp with the nearest ground-truth one within ``max_dt``.

    Returns index arrays ``(i_est, i_gt)``.
    """
    t_est = np.asarray(t_est, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(t_gt)
    ts = t_gt[order]
    j = np.clip(np.searchsorted(ts, t_est), 1, max(len(ts) - 1, 1))
    left = np.maximum(j - 1, 0)
    pick = np.where(np.abs(ts[left] - t_est) <= np.abs(ts[np.minimum(j, len(ts) - 1)] - t_est), left, np.minimum(j, len(ts) - 1))
    ok = np.abs(ts[pick] - t_est) <= max_dt
    return np.flatnonzero(ok), order[pick[ok]]
