"""Toggle the ring LED over the device link and save what the camera sees.

Writes vision.pgm and tactile.pgm (binary greyscale, viewable in most image tools)
for the cup resting flush on a 10 degree slope.
"""
from pathlib import Path

import numpy as np

from flexicup.client import DeviceClient
from flexicup.emulator import EmulatorServer
from flexicup.scene import Pose, flat_scene


def save_pgm(path, pixels):
    h, w = pixels.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode() + np.ascontiguousarray(pixels, np.uint8).tobytes())


scene = flat_scene(incline_deg=10.0, target=(14.0, 10.0))
rest = Pose(10.0, 10.0, float(scene.plane_height_mm(10.0)) / 10.0, 10.0)
with EmulatorServer(scene, "I", start_pose=rest) as srv, DeviceClient(srv.endpoint) as dev:
    for on, name in ((False, "vision"), (True, "tactile")):
        dev.set_led(on)
        frame = dev.next_frame()
        c = frame.pixels[frame.central_mask()]
        p = frame.pixels[frame.peripheral_mask()]
        print(f"{name:8s} seq {frame.seq:4d}  central mean {c.mean():6.1f}  peripheral mean {p.mean():6.1f}")
        save_pgm(f"{name}.pgm", frame.pixels)
print("the annulus stays a vision view, dimmer while the LED sets the exposure; the central disk switches content")
