"""In-process model of the device: pose, LED, valve, camera settings, payload."""
from __future__ import annotations

import math

from .physics import SuctionConfig, attach_update, contact_state
from .scene import Pose, Scene, surface_height
from .sensor import CameraIntrinsics, Frame, render_frame
from .state import DeviceState

MAX_Z_CM = 50.0
MAX_TILT_DEG = 30.0
MAX_FPS = 1000.0
MAX_GAIN = 16.0
DOWNSCALES = (1, 2, 4)
# radius of the physics-only membrane grid used for attach decisions
_PHYSICS_RADIUS_PX = 24


class WorkspaceError(ValueError):
    pass


class DeviceSimulator:
    """State machine behind the emulator; every command is applied instantaneously."""

    def __init__(self, scene: Scene, config_id: str = "I", *, suction: SuctionConfig | None = None,
                 intrinsics: CameraIntrinsics | None = None, start_pose: Pose | None = None,
                 fps: float = 30.0, downscale: int = 1):
        self.scene = scene
        self.config = suction or SuctionConfig.for_config(config_id)
        cup = self.config.cup
        self.intrinsics = intrinsics or CameraIntrinsics()
        if start_pose is None:
            tx, ty = scene.target
            start_pose = Pose(tx, ty, surface_height(scene, tx, ty) / 10.0 + 3.0, 0.0)
        self.state = DeviceState(mode=cup.mode, config_id=cup.config_id,
                                 pressure_kpa=self.config.p_atm_kpa).with_pose(start_pose)
        self.gain = 1.0
        self.fps = float(fps)
        self.downscale = int(downscale)
        self.frames_rendered = 0
        self._held_pose: Pose | None = None
        self._cache_key = None
        self._cache = None

    # -- commands --------------------------------------------------------
    def set_led(self, on: bool) -> None:
        self.state = self.state.replace(led_on=bool(on))

    def set_valve(self, open_: bool) -> None:
        self.state = self.state.replace(valve_open=bool(open_))
        self._update_attachment()

    def set_camera(self, gain: float, fps: float, downscale: int) -> None:
        if not (math.isfinite(gain) and 0 < gain <= MAX_GAIN):
            raise ValueError(f"exposure gain {gain} outside (0, {MAX_GAIN}]")
        if not (math.isfinite(fps) and 0 < fps <= MAX_FPS):
            raise ValueError(f"frame rate {fps} outside (0, {MAX_FPS}]")
        if downscale not in DOWNSCALES:
            raise ValueError(f"downscale {downscale} not in {DOWNSCALES}")
        self.gain, self.fps, self.downscale = float(gain), float(fps), int(downscale)

    def move(self, x_cm: float, y_cm: float, z_cm: float, tilt_deg: float) -> None:
        if not all(math.isfinite(v) for v in (x_cm, y_cm, z_cm, tilt_deg)):
            raise WorkspaceError("non-finite pose")
        if not self.scene.contains(x_cm, y_cm):
            raise WorkspaceError(f"({x_cm}, {y_cm}) outside workspace")
        z_min = 0.0
        if not self.state.attached:
            # the rim centre cannot be pushed through the surface it rests on
            z_min = max(0.0, surface_height(self.scene, x_cm, y_cm) / 10.0)
        z = min(max(z_cm, z_min), MAX_Z_CM)
        tilt = min(max(tilt_deg, -MAX_TILT_DEG), MAX_TILT_DEG)
        self.state = self.state.with_pose(Pose(x_cm, y_cm, z, tilt))
        self._update_attachment()

    def drain(self, frames: int = 1) -> None:
        # linear drain: one hour of 30 Hz streaming empties the battery
        b = max(0.0, self.state.battery_fraction - frames / (3600.0 * 30.0))
        self.state = self.state.replace(battery_fraction=b)

    # -- physics ---------------------------------------------------------
    @property
    def pose(self) -> Pose:
        return self.state.pose

    def contact(self, radius_px: int = _PHYSICS_RADIUS_PX):
        """Membrane contact: with the held object while attached, else with the board."""
        pose = self._held_pose if self._held_pose is not None else self.pose
        return contact_state(self.scene, pose, self.config, radius_px=radius_px)

    def _update_attachment(self) -> None:
        was = self.state.attached
        st = attach_update(self.scene, self.state, self.contact(), self.config)
        if was and not st.attached:
            # released: the object stays behind, re-evaluate against the board
            self._held_pose = None
            st = attach_update(self.scene, st, self.contact(), self.config)
        if st.attached and self._held_pose is None:
            self._held_pose = self.pose
        self.state = st

    # -- camera ----------------------------------------------------------
    def render(self, seq: int = 0, timestamp_us: int = 0) -> Frame:
        intr = self.intrinsics.scaled(self.downscale)
        if not self.state.led_on:
            from dataclasses import replace
            intr = replace(intr, exposure_gain=self.gain)
        key = (self.pose, self.state.led_on, self._held_pose, intr)
        if key != self._cache_key:
            contact = None
            if self.state.led_on:
                contact = self.contact(intr.central_radius_px)
            self._cache = render_frame(self.scene, self.pose, self.state, intr, config=self.config,
                                       contact=contact)
            self._cache_key = key
            self.frames_rendered += 1
        f = self._cache
        return Frame(width_px=f.width_px, height_px=f.height_px, pixels=f.pixels, modality=f.modality,
                     seq=seq, timestamp_us=timestamp_us, center_px=f.center_px,
                     central_radius_px=f.central_radius_px, peripheral_outer_px=f.peripheral_outer_px)
