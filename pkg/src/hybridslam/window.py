"""Keyframe bookkeeping and visual-overlap sliding-window selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Frame, warp_points

MODES = ("standard", "loop_rand", "random")


class KeyframeList:
    """Ordered keyframes; each keeps its latest optimized pose on the Frame object."""

    def __init__(self):
        self.frames: list[Frame] = []

    def add(self, frame: Frame):
        if self.frames and frame.id <= self.frames[-1].id:
            raise ValueError("keyframe ids must be strictly increasing")
        frame.is_keyframe = True
        self.frames.append(frame)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def ids(self):
        return [f.id for f in self.frames]


@dataclass
class SlidingWindow:
    local: list = field(default_factory=list)
    historical: list = field(default_factory=list)
    current: Frame | None = None

    def keyframes(self) -> list[Frame]:
        return list(self.local) + list(self.historical)

    def frames(self) -> list[Frame]:
        """Window keyframes followed by the current frame (unless it is already one of them)."""
        kfs = self.keyframes()
        if self.current is not None and all(f is not self.current for f in kfs):
            kfs.append(self.current)
        return kfs


def overlap_counts(current: Frame, kfs, intr: CameraIntrinsics, n_rep: int = 1024, rng=None, occlusion_check: bool = False) -> np.ndarray:
    """Number of ``n_rep`` sampled current-frame pixels that land inside each keyframe.

    A pixel lands when its warp has positive depth and falls in the image. With
    ``occlusion_check`` it must also not be farther than the keyframe's own depth
    reading (with a 5 cm tolerance).
    """
    rng = np.random.default_rng(rng)
    frames = list(kfs)
    counts = np.zeros(len(frames), dtype=np.int64)
    v, u = current.valid_pixels()
    if len(u) == 0 or not frames:
        return counts
    pick = rng.choice(len(u), n_rep, replace=len(u) < n_rep)
    pix = np.stack([u[pick], v[pick]], axis=1).astype(np.float64)
    depth = current.depth[v[pick], u[pick]].astype(np.float64)
    for i, kf in enumerate(frames):
        q, d, ok = warp_points(pix, depth, current.pose, kf.pose, intr)
        if occlusion_check and ok.any():
            ui = np.round(q[ok, 0]).astype(np.int64)
            vi = np.round(q[ok, 1]).astype(np.int64)
            Dk = kf.depth[vi, ui]
            sub = (Dk <= 0) | (d[ok] <= Dk + 0.05)
            ok[np.flatnonzero(ok)[~sub]] = False
        counts[i] = int(ok.sum())
    return counts


def top_by_count(counts, k: int) -> list[int]:
    """Indices of the ``k`` largest counts, ties broken by lower index."""
    counts = np.asarray(counts)
    order = np.lexsort((np.arange(len(counts)), -counts))
    return [int(i) for i in order[:k]]


def select_window(counts, kfs, W: int = 4, mode: str = "standard", rng=None, current: Frame | None = None) -> SlidingWindow:
    if W % 2:
        raise ValueError("window size must be even")
    if mode not in MODES:
        raise ValueError(f"unknown window mode {mode!r}")
    frames = list(kfs)
    if not frames:
        return SlidingWindow([], [], current)
    rng = np.random.default_rng(rng)
    half = W // 2
    n = len(frames)
    if mode == "standard":
        local = top_by_count(counts, half)
    elif mode == "loop_rand":
        pool = top_by_count(counts, 2 * W)
        local = sorted(int(i) for i in rng.choice(pool, min(half, len(pool)), replace=False))
    else:
        local = []
    rest = [i for i in range(n) if i not in set(local)]
    n_hist = min(W - len(local) if mode == "random" else half, len(rest))
    hist = sorted(int(i) for i in rng.choice(rest, n_hist, replace=False)) if n_hist else []
    return SlidingWindow([frames[i] for i in local], [frames[i] for i in hist], current)


def insert_keyframe_policy(frame_index: int, interval: int = 50) -> bool:
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return frame_index % interval == 0
