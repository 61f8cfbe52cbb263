"""Tracking (pose only) and windowed mapping (features, decoder, poses) by first-order descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import decoder
from .geometry import CameraIntrinsics, Frame, Pose, se3_exp
from .objectives import LossBreakdown, LossWeights, loss_render, loss_sdf, loss_warp, sample_valid_pixels, total_loss
from .render import RenderConfig, render_rays
from .svo import HybridVoxelMap
from .window import SlidingWindow

log = logging.getLogger(__name__)


class TrackingLost(RuntimeError):
    def __init__(self, pose: Pose, msg: str = "no ray hit the map"):
        super().__init__(msg)
        self.pose = pose


@dataclass
class OptimConfig:
    iters_track: int = 30
    iters_map: int = 15
    iters_first: int = 100
    rays_track: int = 1024
    rays_map: int = 1024
    rays_warp: int = 1024
    # tuned on the synthetic room; smaller pose steps, larger map steps than the usual 1e-3/1e-2/1e-3
    lr_pose: float = 3e-4
    lr_feature: float = 5e-2
    lr_decoder: float = 5e-3
    momentum: float = 0.9
    optimizer: str = "momentum"
    early_end: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.iters_track, self.iters_map) < 1:
            raise ValueError("iteration counts must be >= 1")
        if min(self.lr_pose, self.lr_feature, self.lr_decoder) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LossHistory:
    final_losses: list = field(default_factory=list)
    iteration_losses: list = field(default_factory=list)
    iterations: list = field(default_factory=list)

    def record(self, losses: list[float]):
        self.iteration_losses.append(list(losses))
        self.iterations.append(len(losses))
        if losses:
            self.final_losses.append(losses[-1])


def early_end_check(history: LossHistory, iter_losses, iters_map: int) -> bool:
    """Break once more than ``iters_map // 3`` of this frame's iteration losses are
    below the mean final loss of previous frames."""
    if not history.final_losses:
        return False
    mean_prev = float(np.mean(history.final_losses))
    below = int(np.sum(np.asarray(iter_losses, dtype=np.float64) < mean_prev))
    return below > iters_map // 3


class Stepper:
    """Momentum or Adam updates, with per-key state that survives row growth."""

    def __init__(self, kind: str = "momentum", momentum: float = 0.9, betas=(0.9, 0.999), eps=1e-8):
        self.kind = kind
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def direction(self, key, grad: np.ndarray) -> np.ndarray:
        """Update direction for ``grad``; the caller scales by its rate and subtracts."""
        st = self.state.get(key)
        if st is None:
            st = self.state[key] = {"m": np.zeros_like(grad), "v": np.zeros_like(grad), "t": 0}
        elif st["m"].shape != grad.shape:
            # vertex stores grow as the map allocates; keep moments of existing rows
            for name in ("m", "v"):
                grown = np.zeros_like(grad)
                n = min(len(grown), len(st[name]))
                grown[:n] = st[name][:n]
                st[name] = grown
        m = st["m"]
        if self.kind == "momentum":
            m *= self.momentum
            m += grad
            return m
        v = st["v"]
        st["t"] += 1
        b1, b2 = self.betas
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad**2
        return (m / (1 - b1 ** st["t"])) / (np.sqrt(v / (1 - b2 ** st["t"])) + self.eps)


@dataclass
class Evaluation:
    breakdown: LossBreakdown
    grads: dict
    n_valid: int


def evaluate(
    vmap: HybridVoxelMap,
    params: dict,
    frames: list[Frame],
    poses: list[Pose],
    ray_frame: np.ndarray,
    pixels: np.ndarray,
    intr: CameraIntrinsics,
    weights: LossWeights,
    rcfg: RenderConfig,
    need=("params", "features", "pose"),
    warp: tuple | None = None,
) -> Evaluation:
    """Render the given rays and return the weighted loss and its gradients.

    ``warp`` optionally is ``(current_index, window_indices, (u, v))`` and adds the
    warping terms between ``frames[current_index]`` and the window frames.
    """
    batch = render_rays(vmap, params, poses, ray_frame, pixels, intr, rcfg)
    pix = pixels.astype(np.int64)
    C_obs = np.empty((len(pix), 3))
    D_obs = np.empty(len(pix))
    for i, f in enumerate(frames):
        sel = ray_frame == i
        C_obs[sel] = f.color[pix[sel, 1], pix[sel, 0]]
        D_obs[sel] = f.depth[pix[sel, 1], pix[sel, 0]]
    L_rgb, L_d, n_rgb, n_d, g_col, g_dep = loss_render(batch.color, batch.depth, batch.valid, C_obs, D_obs)
    L_fs, L_sdf, n_fs, n_sdf, g_fs, g_sdf = loss_sdf(batch.ray_idx, batch.s, batch.d, D_obs, batch.valid, rcfg.tr)
    terms = {"rgb": L_rgb, "d": L_d, "fs": L_fs, "sdf": L_sdf}
    counts = {"rgb": n_rgb, "d": n_d, "fs": n_fs, "sdf": n_sdf}

    n_frames = len(frames)
    grads = batch.backward(
        vmap,
        params,
        grad_color=weights.rgb * g_col,
        grad_depth=weights.d * g_dep,
        grad_s=weights.fs * g_fs + weights.sdf * g_sdf,
        n_frames=n_frames,
        need=need,
    )
    if warp is not None:
        ci, wi, wpix = warp
        res = loss_warp(frames[ci], [frames[k] for k in wi], intr, wpix, poses[ci], [poses[k] for k in wi])
        terms["warp_rgb"], terms["warp_d"] = res.warp_rgb, res.warp_d
        counts["warp_rgb"] = counts["warp_d"] = res.count
        if "pose" in need:
            lam = np.array([weights.warp_rgb, weights.warp_d])
            grads["pose"][ci] += lam @ res.grad_current
            for j, k in enumerate(wi):
                grads["pose"][k] += lam @ res.grad_window[:, j]
    bd = total_loss(terms, weights, include_warp=warp is not None, counts=counts)
    return Evaluation(bd, grads, int(batch.valid.sum()))


def _sample_rays(frames: list[Frame], n: int, rng: np.random.Generator):
    """Spread ``n`` rays over frames as evenly as possible, valid-depth pixels only."""
    k = len(frames)
    per = np.full(k, n // k)
    per[: n % k] += 1
    rf, px = [], []
    for i, (f, m) in enumerate(zip(frames, per)):
        u, v = sample_valid_pixels(f, int(m), rng)
        rf.append(np.full(len(u), i, dtype=np.int64))
        px.append(np.stack([u, v], axis=1))
    return np.concatenate(rf), np.concatenate(px).astype(np.float64)


def track_frame(
    vmap: HybridVoxelMap,
    params: dict,
    frame: Frame,
    intr: CameraIntrinsics,
    init_pose: Pose,
    cfg: OptimConfig,
    weights: LossWeights,
    rcfg: RenderConfig,
    rng: np.random.Generator,
) -> tuple[Pose, list[float]]:
    """Optimize the frame's pose against the frozen map, starting from ``init_pose``."""
    pose = init_pose
    stepper = Stepper(cfg.optimizer, cfg.momentum)
    losses = []
    for _ in range(cfg.iters_track):
        rf, px = _sample_rays([frame], cfg.rays_track, rng)
        ev = evaluate(vmap, params, [frame], [pose], rf, px, intr, weights, rcfg, need=("pose",))
        if ev.n_valid == 0:
            raise TrackingLost(pose)
        losses.append(ev.breakdown.total)
        step = stepper.direction("pose", ev.grads["pose"][0])
        pose = se3_exp(-cfg.lr_pose * step) @ pose
    return pose, losses


@dataclass
class MapperState:
    """Optimizer memory carried across mapping calls (feature and decoder moments)."""

    stepper: Stepper
    history: LossHistory = field(default_factory=LossHistory)


def map_update(
    vmap: HybridVoxelMap,
    params: dict,
    window: SlidingWindow,
    intr: CameraIntrinsics,
    cfg: OptimConfig,
    weights: LossWeights,
    rcfg: RenderConfig,
    rng: np.random.Generator,
    state: MapperState,
    anchor_id: int | None = 0,
    iters: int | None = None,
    use_warp: bool = True,
    optimize_poses: bool = True,
) -> list[float]:
    """Jointly refine features, decoder and window poses; writes poses back to the frames.

    SDF priors are left to fusion. The anchor frame's pose never moves. Returns the
    per-iteration total losses, which are also recorded in ``state.history``.
    """
    frames = window.frames()
    cur = window.current
    ci = next(i for i, f in enumerate(frames) if f is cur) if cur is not None else len(frames) - 1
    others = [i for i in range(len(frames)) if i != ci]
    poses = [f.pose for f in frames]
    pose_stepper = Stepper(cfg.optimizer, cfg.momentum)
    n_iters = cfg.iters_map if iters is None else iters
    losses: list[float] = []
    for _ in range(n_iters):
        rf, px = _sample_rays(frames, cfg.rays_map, rng)
        warp = None
        if use_warp and others:
            wu, wv = sample_valid_pixels(frames[ci], cfg.rays_warp, rng)
            warp = (ci, others, (wu, wv))
        need = ("params", "features", "pose") if optimize_poses else ("params", "features")
        ev = evaluate(vmap, params, frames, poses, rf, px, intr, weights, rcfg, need=need, warp=warp)
        losses.append(ev.breakdown.total)

        g = ev.grads
        vmap._features[: vmap.n_vertices] -= cfg.lr_feature * state.stepper.direction("features", g["features"])
        for k, gk in g["params"].items():
            params[k] -= cfg.lr_decoder * state.stepper.direction(("decoder", k), gk)
        if optimize_poses:
            for i, f in enumerate(frames):
                if anchor_id is not None and f.id == anchor_id:
                    continue
                step = pose_stepper.direction(i, g["pose"][i])
                poses[i] = se3_exp(-cfg.lr_pose * step) @ poses[i]

        if cfg.early_end and early_end_check(state.history, losses, cfg.iters_map):
            break
    if optimize_poses:
        for f, p in zip(frames, poses):
            f.pose = p
    state.history.record(losses)
    return losses


def make_mapper_state(cfg: OptimConfig) -> MapperState:
    return MapperState(Stepper(cfg.optimizer, cfg.momentum))


def decoder_checksum(params: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()

