"""Command line entry point: ``hybridslam {synth,run,mesh,eval,render}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthetic
from .config import SlamConfig
from .dataset import load_sequence, read_tum, write_sequence, write_tum
from .evaluation import associate, evaluate_ate
from .mesh import extract_mesh, write_ply
from .pipeline import run_slam
from .svo import load_snapshot, save_snapshot

log = logging.getLogger("hybridslam")

SCENES = {"room": synthetic.default_room, "plane": synthetic.plane_scene, "sphere": synthetic.sphere_scene}
TRAJECTORIES = {"circle": synthetic.circle_trajectory, "figure8": synthetic.figure_eight_trajectory}

# flag -> (section, key)
CONFIG_FLAGS = {
    "iters_track": ("optim", "iters_track"),
    "iters_map": ("optim", "iters_map"),
    "iters_first": ("optim", "iters_first"),
    "rays_track": ("optim", "rays_track"),
    "rays_map": ("optim", "rays_map"),
    "rays_warp": ("optim", "rays_warp"),
    "lr_pose": ("optim", "lr_pose"),
    "lr_feature": ("optim", "lr_feature"),
    "lr_decoder": ("optim", "lr_decoder"),
    "optimizer": ("optim", "optimizer"),
    "voxel_size": ("map", "voxel_size"),
    "alloc_threshold": ("map", "alloc_threshold"),
    "window_size": ("window", "size"),
    "keyframe_interval": ("window", "keyframe_interval"),
}


def build_config(args) -> SlamConfig:
    cfg = SlamConfig.load(args.config) if getattr(args, "config", None) else SlamConfig()
    for flag, (sec, key) in CONFIG_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(sec, key, val)
    for item in getattr(args, "set", None) or []:
        name, _, raw = item.partition("=")
        sec, _, key = name.partition(".")
        if not raw or not key:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        cfg.set(sec, key, raw)
    if getattr(args, "seed", None) is not None:
        cfg.optim.seed = args.seed
    if getattr(args, "early_end", False):
        cfg.optim.early_end = True
    if getattr(args, "window_mode", None):
        cfg.window.mode = args.window_mode.replace("-", "_")
    if getattr(args, "no_prior", False):
        cfg.map.use_prior = False
    return cfg.validated()


def cmd_synth(args):
    intr = synthetic.default_intrinsics(args.width, args.height)
    scene = SCENES[args.scene]()
    poses = TRAJECTORIES[args.trajectory](args.frames)
    frames = synthetic.render_frames(scene, poses, intr, noise=args.noise, seed=args.seed)
    write_sequence(args.out, frames, intr, poses)
    print(f"wrote {len(frames)} frames to {args.out}")


def cmd_run(args):
    cfg = build_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_text())
        return
    if args.dataset is None:
        raise SystemExit("run: dataset directory required")
    seq = load_sequence(args.dataset)
    n = len(seq) if args.max_frames is None else min(args.max_frames, len(seq))
    frames = (seq.frame(i) for i in range(n))

    def progress(i, frame):
        if args.verbose or i % 10 == 0:
            log.info("frame %d/%d", i + 1, n)

    res = run_slam(frames, seq.intrinsics, cfg, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "traj.txt", res.timestamps, res.poses)
    save_snapshot(out / "map.bin", res.vmap, res.params)
    with open(out / "config.ini", "w") as fh:
        fh.write(cfg.to_text())
    summary = {
        "frames": len(res.poses),
        "keyframes": res.keyframes,
        "lost": res.lost,
        "map_iterations": res.map_iterations,
        "seconds": res.seconds,
    }
    if seq.ground_truth is not None and res.poses:
        ie, ig = associate(res.timestamps, [t for t, _ in seq.ground_truth])
        rep = evaluate_ate([res.poses[i] for i in ie], [seq.ground_truth[j][1] for j in ig])
        summary["ate_rmse_cm"] = rep.rmse_cm
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))


def cmd_mesh(args):
    vmap, params = load_snapshot(args.snapshot)
    if args.prior_only:
        params = None
    mesh = extract_mesh(vmap, params, args.resolution)
    write_ply(args.out, mesh)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")


def cmd_eval(args):
    est = read_tum(args.estimate)
    gt = read_tum(args.ground_truth)
    ie, ig = associate([t for t, _ in est], [t for t, _ in gt], args.max_dt)
    if len(ie) != len(est):
        raise SystemExit(f"only {len(ie)} of {len(est)} poses associate with ground truth")
    rep = evaluate_ate([est[i][1] for i in ie], [gt[j][1] for j in ig])
    print(f"ATE RMSE {rep.rmse_cm:.4f} cm over {len(ie)} poses (max {100 * rep.errors.max():.4f} cm)")


def cmd_render(args):
    from PIL import Image

    from .geometry import Pose
    from .render import RenderConfig, render_rays

    vmap, params = load_snapshot(args.snapshot)
    if params is None:
        raise SystemExit("snapshot carries no decoder parameters")
    seq = load_sequence(args.dataset)
    traj = read_tum(args.trajectory)
    pose: Pose = traj[args.frame][1]
    intr = seq.intrinsics
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    pix = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    rc = RenderConfig(dtype="float32")
    color = np.zeros((len(pix), 3))
    depth = np.zeros(len(pix))
    for lo in range(0, len(pix), 4096):
        sl = slice(lo, lo + 4096)
        b = render_rays(vmap, params, [pose], np.zeros(len(pix[sl]), dtype=np.int64), pix[sl], intr, rc)
        color[sl], depth[sl] = b.color, b.depth
    img = np.clip(np.round(color.reshape(intr.height, intr.width, 3) * 255), 0, 255).astype(np.uint8)
    obs = seq.frame(args.frame)
    side = np.clip(np.round(obs.color * 255), 0, 255).astype(np.uint8)
    Image.fromarray(np.concatenate([side, img], axis=1)).save(args.out)
    if args.depth_out:
        d = np.clip(np.round(depth.reshape(intr.height, intr.width) * intr.depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(d).save(args.depth_out)
    print(f"wrote {args.out}")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridslam", description="RGB-D SLAM on a sparse voxel map with SDF priors and a residual decoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic RGB-D sequence")
    s.add_argument("out")
    s.add_argument("--scene", choices=sorted(SCENES), default="room")
    s.add_argument("--trajectory", choices=sorted(TRAJECTORIES), default="circle")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--noise", type=float, default=0.0, help="depth noise std in meters")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="run SLAM over a dataset directory")
    r.add_argument("dataset", nargs="?")
    r.add_argument("--out", default="slam_out")
    r.add_argument("--config", help="INI config file (see --dump-config)")
    r.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    r.add_argument("--seed", type=int)
    r.add_argument("--early-end", action="store_true")
    r.add_argument("--window-mode", choices=["standard", "loop-rand", "random"])
    r.add_argument("--no-prior", action="store_true", help="disable SDF prior fusion")
    r.add_argument("--max-frames", type=int)
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    for flag in CONFIG_FLAGS:
        kind = str if flag == "optimizer" else (float if flag.startswith("lr") or flag == "voxel_size" else int)
        r.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mesh", help="extract a PLY mesh from a map snapshot")
    m.add_argument("snapshot")
    m.add_argument("--out", default="mesh.ply")
    m.add_argument("--resolution", type=float)
    m.add_argument("--prior-only", action="store_true", help="ignore the decoder residual")
    m.set_defaults(func=cmd_mesh)

    e = sub.add_parser("eval", help="ATE RMSE of a TUM trajectory against ground truth")
    e.add_argument("estimate")
    e.add_argument("ground_truth")
    e.add_argument("--max-dt", type=float, default=0.02)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", help="re-render a frame from a snapshot next to the input image")
    d.add_argument("snapshot")
    d.add_argument("--dataset", required=True)
    d.add_argument("--trajectory", required=True)
    d.add_argument("--frame", type=int, default=0)
    d.add_argument("--out", default="render.png")
    d.add_argument("--depth-out")
    d.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
