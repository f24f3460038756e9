"""Surround-view stereo toolkit: rig geometry, SGM, a small autodiff engine
and a toy detector co-trained with a stereo disparity head and an
overlap-region adversary."""

from .autodiff import Tensor
from .config import ConfigError, ExperimentConfig
from .geometry import Camera, CameraIntrinsics, CameraPose, CameraRig, default_rig
from .scene import Scene, render, sample_scene
from .sgm import DisparityMap, SgmParams, sgm_disparity

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CameraIntrinsics",
    "CameraPose",
    "CameraRig",
    "ConfigError",
    "DisparityMap",
    "ExperimentConfig",
    "Scene",
    "SgmParams",
    "Tensor",
    "default_rig",
    "render",
    "sample_scene",
    "sgm_disparity",
]
