"""Simulated dual-mode suction cup with an in-cup visuotactile camera.

Subpackages cover the scene and physics models, the rendered sensor, the
device wire protocol and emulator, classical perception, the grasp state
machine, a numpy diffusion policy and the benchmark harness.
"""
from .physics import SuctionConfig, contact_state, cup_config, holding_force
from .scene import Pose, Scene, feasible_positions, flat_scene, generate_board
from .sensor import CameraIntrinsics, Frame, Modality, render_frame
from .state import DeviceState

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "DeviceState", "Frame", "Modality", "Pose", "Scene", "SuctionConfig",
           "contact_state", "cup_config", "feasible_positions", "flat_scene", "generate_board",
           "holding_force", "render_frame"]
