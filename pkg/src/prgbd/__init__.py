"""Self-improving pseudo RGB-D: alternate SLAM pose refinement and depth-field refinement."""
from .depth_refiner import RefinerConfig, propagate_to_nonkeyframes, refine_depths
from .driver import RunConfig, emit_reports, run_self_improving
from .evaluation import depth_metrics, trajectory_metrics, umeyama_align
from .geometry import CameraIntrinsics, PoseSE3, Sim3Transform, adaptive_baseline
from .losses import LossWeights
from .pose_backend import TrackingParams, track_sequence
from .scene_sim import NoiseModel, SceneConfig, corrupt_sequence, default_scene_config, generate_scene

__version__ = "0.1.0"
