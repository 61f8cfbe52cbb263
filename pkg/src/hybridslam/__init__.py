"""Dense RGB-D SLAM on a sparse voxel map that blends fused SDF priors with a learned residual."""

from .config import SlamConfig
from .geometry import CameraIntrinsics, Frame, Pose
from .pipeline import SlamResult, run_slam
from .svo import HybridVoxelMap

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "Frame", "HybridVoxelMap", "Pose", "SlamConfig", "SlamResult", "run_slam"]
