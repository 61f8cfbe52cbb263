"""Frame-by-frame tracking and windowed mapping over an RGB-D sequence."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import decoder
from .config import SlamConfig
from .fusion import integrate_frame
from .geometry import CameraIntrinsics, Frame, Pose
from .optimize import LossHistory, TrackingLost, make_mapper_state, map_update, track_frame
from .svo import HybridVoxelMap
from .window import KeyframeList, overlap_counts, select_window

log = logging.getLogger(__name__)


@dataclass
class SlamResult:
    poses: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    vmap: HybridVoxelMap | None = None
    params: dict | None = None
    history: LossHistory = field(default_factory=LossHistory)
    lost: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def map_iterations(self) -> int:
        return int(sum(self.history.iterations))


def run_slam(frames, intr: CameraIntrinsics, cfg: SlamConfig | None = None, seed: int | None = None, progress=None) -> SlamResult:
    """Track every frame against the map, then allocate, fuse and map with a sliding window.

    ``frames`` is any iterable of Frame; their poses are ignored and the first frame
    defines the world (identity). Input frames are not modified. Keyframes are inserted
    every ``window.keyframe_interval`` frames; mapping runs after every frame with the
    current frame joined to a window picked among the keyframes.
    """
    cfg = cfg or SlamConfig()
    seed = cfg.optim.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    mc, oc = cfg.map, cfg.optim
    vmap = HybridVoxelMap(mc.voxel_size, mc.feature_dim, mc.n_levels, mc.alloc_threshold, mc.feature_init, seed=seed)
    params = decoder.init_params(mc.feature_dim, mc.hidden, seed=seed)
    state = make_mapper_state(oc)
    kfs = KeyframeList()
    out = SlamResult(vmap=vmap, params=params, history=state.history)
    t_start = time.perf_counter()
    anchor_id = None
    last: Pose | None = None
    for i, src in enumerate(frames):
        frame = replace(src, pose=Pose.identity(), is_keyframe=False)
        if last is None:
            anchor_id = frame.id
        else:
            try:
                frame.pose, _ = track_frame(vmap, params, frame, intr, last, oc, cfg.loss, cfg.render, rng)
            except TrackingLost as e:
                log.warning("tracking lost at frame %d", frame.id)
                out.lost.append(frame.id)
                frame.pose = e.pose

        vmap.allocate_from_frame(frame, intr)
        if mc.use_prior:
            integrate_frame(vmap, frame, intr)
        if i % cfg.window.keyframe_interval == 0:
            kfs.add(frame)
        counts = overlap_counts(frame, kfs, intr, cfg.window.n_rep, rng)
        window = select_window(counts, kfs, cfg.window.size, cfg.window.mode, rng, current=frame)
        map_update(
            vmap,
            params,
            window,
            intr,
            oc,
            cfg.loss,
            cfg.render,
            rng,
            state,
            anchor_id=anchor_id,
            iters=oc.iters_first if last is None else None,
            use_warp=cfg.window.use_warp,
        )
        last = frame.pose
        out.poses.append(frame)
        out.timestamps.append(frame.timestamp)
        if progress is not None:
            progress(i, frame)
    # keyframe poses keep being refined after their own step, so read them at the end
    out.poses = [f.pose for f in out.poses]
    out.keyframes = kfs.ids
    out.seconds = time.perf_counter() - t_start
    return out
