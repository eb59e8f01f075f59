"""Device state shared by the simulator, the wire protocol and the controllers."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

P_ATM_KPA = 101.325


@dataclass(frozen=True)
class DeviceState:
    x_cm: float = 0.0
    y_cm: float = 0.0
    z_cm: float = 0.0
    tilt_deg: float = 0.0
    led_on: bool = False
    valve_open: bool = False
    pressure_kpa: float = P_ATM_KPA
    attached: bool = False
    mode: str = "vacuum"
    config_id: str = "I"
    battery_fraction: float = 1.0

    def vector(self) -> np.ndarray:
        """The 8-value telemetry vector [x, y, z, tilt, led, valve, pressure, attached]."""
        return np.array([self.x_cm, self.y_cm, self.z_cm, self.tilt_deg,
                         float(self.led_on), float(self.valve_open),
                         self.pressure_kpa, float(self.attached)])

    @property
    def pose(self):
        from .scene import Pose
        return Pose(self.x_cm, self.y_cm, self.z_cm, self.tilt_deg)

    def with_pose(self, pose) -> "DeviceState":
        return replace(self, x_cm=pose.x_cm, y_cm=pose.y_cm, z_cm=pose.z_cm, tilt_deg=pose.tilt_deg)

    def replace(self, **kw) -> "DeviceState":
        return replace(self, **kw)
