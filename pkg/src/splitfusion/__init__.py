"""Split-scene dense RGB-D reconstruction.

Each frame is split into semantic surfaces. Rigid surfaces are tracked by
point-to-plane ICP, non-rigid ones by an embedded deformation graph, and
every surface is fused into its own TSDF volume before the parts are
re-united in camera coordinates.
"""

from .config import PipelineConfig
from .dataset_io import Trajectory, load_masks, load_tum_sequence, read_trajectory, write_trajectory
from .evaluation import AteReport, align, ate_rmse
from .geometry import CameraIntrinsics, DepthFrame, PointCloud, RigidTransform, TriangleMesh
from .pipeline import SceneState, process_frame, reunite, run_sequence
from .synthetic import SceneScript, render

__all__ = [
    "AteReport",
    "CameraIntrinsics",
    "DepthFrame",
    "PipelineConfig",
    "PointCloud",
    "RigidTransform",
    "SceneScript",
    "SceneState",
    "Trajectory",
    "TriangleMesh",
    "align",
    "ate_rmse",
    "load_masks",
    "load_tum_sequence",
    "process_frame",
    "read_trajectory",
    "render",
    "reunite",
    "run_sequence",
    "write_trajectory",
]

__version__ = "0.1.0"
