"""On-disk RGB-D sequences and TUM trajectory files.

Layout of a sequence directory::

    intrinsics.txt      fx fy cx cy width height depth_scale
    rgb/000000.png      8-bit RGB
    depth/000000.png    16-bit, depth_scale units per meter
    timestamps.txt      optional, one float per frame (default: index / 30)
    gt_traj.txt         optional, TUM lines "t tx ty tz qx qy qz qw"
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Frame, Pose


@dataclass
class DatasetSequence:
    root: Path
    intrinsics: CameraIntrinsics
    records: list = field(default_factory=list)  # (timestamp, color path, depth path)
    ground_truth: list | None = None  # [(timestamp, Pose)]

    def __post_init__(self):
        ts = [r[0] for r in self.records]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be non-decreasing")

    def __len__(self):
        return len(self.records)

    def frame(self, i: int) -> Frame:
        t, cpath, dpath = self.records[i]
        color = np.asarray(Image.open(cpath).convert("RGB"), dtype=np.float32) / 255.0
        depth = np.asarray(Image.open(dpath), dtype=np.float32) / np.float32(self.intrinsics.depth_scale)
        f = Frame(i, float(t), color, depth, Pose.identity())
        f.check(self.intrinsics)
        return f

    def frames(self):
        for i in range(len(self)):
            yield self.frame(i)

    @property
    def gt_poses(self):
        return None if self.ground_truth is None else [p for _, p in self.ground_truth]


def load_sequence(root) -> DatasetSequence:
    root = Path(root)
    with open(root / "intrinsics.txt") as fh:
        intr = CameraIntrinsics.from_line(fh.readline())
    colors = sorted((root / "rgb").glob("*.png"))
    depths = sorted((root / "depth").glob("*.png"))
    if len(colors) != len(depths):
        raise ValueError(f"{len(colors)} colour images but {len(depths)} depth images")
    ts_file = root / "timestamps.txt"
    if ts_file.exists():
        ts = np.loadtxt(ts_file, ndmin=1)
        if len(ts) != len(colors):
            raise ValueError("timestamps.txt length does not match the image count")
    else:
        ts = np.arange(len(colors)) / 30.0
    gt = read_tum(root / "gt_traj.txt") if (root / "gt_traj.txt").exists() else None
    return DatasetSequence(root, intr, list(zip(ts.tolist(), colors, depths)), gt)


def write_frame(root, i: int, frame: Frame, intr: CameraIntrinsics):
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(np.asarray(frame.color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(root / "rgb" / f"{i:06d}.png")
    d = np.clip(np.round(np.asarray(frame.depth, dtype=np.float64) * intr.depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(d).save(root / "depth" / f"{i:06d}.png")


def write_sequence(root, frames, intr: CameraIntrinsics, gt_poses=None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "intrinsics.txt", "w") as fh:
        fh.write(intr.to_line() + "\n")
    ts = []
    for i, f in enumerate(frames):
        write_frame(root, i, f, intr)
        ts.append(f.timestamp)
    np.savetxt(root / "timestamps.txt", np.asarray(ts), fmt="%.6f")
    if gt_poses is not None:
        write_tum(root / "gt_traj.txt", ts, gt_poses)


def format_tum(timestamps, poses) -> str:
    lines = []
    for t, p in zip(timestamps, poses):
        q = p.quaternion_xyzw()
        vals = [float(t), *p.translation.tolist(), *q.tolist()]
        lines.append(" ".join(f"{v:.9f}" for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def write_tum(path, timestamps, poses):
    if len(timestamps) != len(poses):
        raise ValueError("one timestamp per pose required")
    with open(path, "w") as fh:
        fh.write(format_tum(timestamps, poses))


def read_tum(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 8:
                raise ValueError(f"bad TUM line: {line!r}")
            out.append((v[0], Pose.from_quaternion_xyzw(v[4:8], v[1:4])))
    return out
