"""Dual-zone fisheye rendering with LED-controlled vision/tactile switching.

The camera sits on the cup axis ``camera_height_cm`` above the rim plane and
looks down through an equidistant 180 degree fisheye (r = f * theta). Image
columns follow the cup +x axis and rows follow +y. Pixel (row i, col j) has
coordinates (j, i); the optical axis passes through ``center_px``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from functools import lru_cache

import numpy as np

from .physics import ContactResult, SuctionConfig, contact_state, no_contact
from .scene import Pose, Scene

OBSTACLE_VALUE = 40
CLEAR_VALUE = 200
MARKER_VALUE = 120
BACKGROUND_VALUE = 80
MARKER_RADIUS_CM = 1.0
PERIPHERAL_DIM = 0.5

TACTILE_AMBIENT = 30.0
# side-emitting LEDs at +x, -x, +y, -y; unequal weights make shading direction-dependent
LED_WEIGHTS = (60.0, 20.0, 45.0, 25.0)
LED_ELEVATION_DEG = 30.0


class Modality(IntEnum):
    VISION = 0
    TACTILE = 1


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    width_px: int = 1024
    height_px: int = 768
    center_px: tuple[int, int] = (512, 384)
    central_radius_px: int = 280
    peripheral_outer_px: int = 380
    fov_deg: float = 180.0
    exposure_gain: float = 1.0
    camera_height_cm: float = 1.5

    def __post_init__(self):
        if not 0 < self.central_radius_px < self.peripheral_outer_px <= min(self.width_px, self.height_px) / 2:
            raise ValueError("need 0 < central radius < peripheral outer <= min(width, height)/2")
        if self.exposure_gain <= 0:
            raise ValueError("exposure_gain must be positive")

    @property
    def f_px_per_rad(self) -> float:
        return self.peripheral_outer_px / math.radians(self.fov_deg / 2)

    @property
    def central_theta(self) -> float:
        return self.central_radius_px / self.f_px_per_rad

    def scaled(self, downscale: int) -> "CameraIntrinsics":
        if downscale == 1:
            return self
        return replace(self, width_px=self.width_px // downscale, height_px=self.height_px // downscale,
                       center_px=(self.center_px[0] // downscale, self.center_px[1] // downscale),
                       central_radius_px=self.central_radius_px // downscale,
                       peripheral_outer_px=self.peripheral_outer_px // downscale)


@dataclass(frozen=True, eq=False)
class Frame:
    width_px: int
    height_px: int
    pixels: np.ndarray  # (height, width) uint8
    modality: Modality
    seq: int
    timestamp_us: int
    center_px: tuple[int, int]
    central_radius_px: int
    peripheral_outer_px: int

    def __post_init__(self):
        if self.pixels.shape != (self.height_px, self.width_px) or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixel raster {self.pixels.shape}/{self.pixels.dtype} does not match "
                             f"{self.height_px}x{self.width_px} uint8")

    def radius_map(self) -> np.ndarray:
        return _radius_map(self.width_px, self.height_px, *self.center_px)

    def central_mask(self) -> np.ndarray:
        return self.radius_map() <= self.central_radius_px

    def lens_mask(self) -> np.ndarray:
        return self.radius_map() <= self.peripheral_outer_px

    def peripheral_mask(self) -> np.ndarray:
        r = self.radius_map()
        return (r > self.central_radius_px) & (r <= self.peripheral_outer_px)

    def central_crop(self) -> np.ndarray:
        """Square crop around the central disk, (2R+1) pixels per side."""
        cx, cy = self.center_px
        r = self.central_radius_px
        return self.pixels[cy - r:cy + r + 1, cx - r:cx + r + 1]


@lru_cache(maxsize=8)
def _radius_map(w: int, h: int, cx: int, cy: int) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(w) - cx, np.arange(h) - cy)
    r = np.hypot(jj, ii)
    r.setflags(write=False)
    return r


def fisheye_project(theta_rad: float, phi_rad: float, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    """Pixel position of a ray at polar angle theta and azimuth phi."""
    if not 0.0 <= theta_rad <= math.pi / 2 + 1e-12:
        raise ProjectionError(f"theta {theta_rad} outside [0, pi/2]")
    r = intrinsics.f_px_per_rad * theta_rad
    cx, cy = intrinsics.center_px
    return cx + r * math.cos(phi_rad), cy + r * math.sin(phi_rad)


def fisheye_unproject(x_px: float, y_px: float, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    """Inverse of :func:`fisheye_project`: (theta, phi) of a pixel."""
    cx, cy = intrinsics.center_px
    dx, dy = x_px - cx, y_px - cy
    return math.hypot(dx, dy) / intrinsics.f_px_per_rad, math.atan2(dy, dx)


@lru_cache(maxsize=8)
def _lens_rays(w, h, cx, cy, r_outer, fov_deg):
    r = _radius_map(w, h, cx, cy)
    lens = r <= r_outer
    idx = np.flatnonzero(lens)
    jj = idx % w - cx
    ii = idx // w - cy
    f = r_outer / math.radians(fov_deg / 2)
    theta = r.ravel()[idx] / f
    phi = np.arctan2(ii, jj)
    st = np.sin(theta)
    d = np.stack([st * np.cos(phi), st * np.sin(phi), -np.cos(theta)])
    return idx, r.ravel()[idx], d


def _cast(scene: Scene, pose: Pose, intr: CameraIntrinsics, d: np.ndarray) -> np.ndarray:
    """Shade camera-frame ray directions ``d`` (3, N) by where they meet the board."""
    th = math.radians(pose.tilt_deg)
    c, s = math.cos(th), math.sin(th)
    dx = d[0] * c - d[2] * s
    dy = d[1]
    dz = d[0] * s + d[2] * c
    h = intr.camera_height_cm
    ox, oy, oz = pose.x_cm - h * s, pose.y_cm, pose.z_cm + h * c
    ta = math.tan(math.radians(scene.incline_deg))
    denom = dz - dx * ta
    hits = denom < -1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hits, (ox * ta + scene.base_mm / 10.0 - oz) / denom, 0.0)
    px = ox + t * dx
    py = oy + t * dy
    out = np.full(d.shape[1], float(BACKGROUND_VALUE))
    on_board = hits & (px >= 0) & (px < scene.width_cm) & (py >= 0) & (py < scene.height_cm)
    ny, nx = scene.shape
    ix = np.clip((px[on_board] / scene.cell_cm).astype(np.int64), 0, nx - 1)
    iy = np.clip((py[on_board] / scene.cell_cm).astype(np.int64), 0, ny - 1)
    out[on_board] = np.where(scene.obstacles[iy, ix], OBSTACLE_VALUE, CLEAR_VALUE)
    tx, ty = scene.target
    marker = hits & ((px - tx) ** 2 + (py - ty) ** 2 <= MARKER_RADIUS_CM ** 2)
    out[marker] = MARKER_VALUE
    return out


def synth_tactile_shading(deformation_mm: np.ndarray, spacing_mm: float = 1.0, *,
                          contact_mask: np.ndarray | None = None, contact_eps_mm: float = 0.05, ambient: float = TACTILE_AMBIENT,
                          weights=LED_WEIGHTS, elevation_deg: float = LED_ELEVATION_DEG) -> np.ndarray:
    """Four-light Lambertian rendering of a membrane height field.

    Where the membrane touches something (``contact_mask``, or deformation
    above ``contact_eps_mm`` when no mask is given) the reflective layer
    returns LED light; elsewhere only the ambient level shows.
    Normals come from central differences of the height field.
    """
    h = np.asarray(deformation_mm, dtype=np.float64)
    gy, gx = np.gradient(h, spacing_mm)
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    nx, ny, nz = -gx / norm, -gy / norm, 1.0 / norm
    ce, se = math.cos(math.radians(elevation_deg)), math.sin(math.radians(elevation_deg))
    lights = ((ce, 0.0), (-ce, 0.0), (0.0, ce), (0.0, -ce))
    lit = np.zeros_like(h)
    for (lx, ly), w in zip(lights, weights):
        lit += w * np.maximum(0.0, nx * lx + ny * ly + nz * se)
    touching = h > contact_eps_mm if contact_mask is None else np.asarray(contact_mask, bool)
    shade = ambient + np.where(touching, lit, 0.0)
    return np.clip(shade, 0.0, 255.0)


def _quantize(v) -> np.ndarray:
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def render_frame(scene: Scene, pose: Pose, device_state, intrinsics: CameraIntrinsics | None = None, *,
                 config: SuctionConfig | None = None, contact: ContactResult | None = None,
                 seq: int = 0, timestamp_us: int = 0) -> Frame:
    """Render one dual-zone frame.

    ``contact`` overrides the simulated membrane state (used when the cup is
    holding an object); otherwise it is computed from ``scene`` and ``pose``.
    """
    intr = intrinsics or CameraIntrinsics()
    w, h = intr.width_px, intr.height_px
    cx, cy = intr.center_px
    rc = intr.central_radius_px
    idx, r, d = _lens_rays(w, h, cx, cy, intr.peripheral_outer_px, intr.fov_deg)
    img = np.zeros(w * h)
    led = bool(device_state.led_on)
    if not led:
        img[idx] = _cast(scene, pose, intr, d) * intr.exposure_gain
        pixels = _quantize(img.reshape(h, w))
    else:
        periph = r > rc
        img[idx[periph]] = _cast(scene, pose, intr, d[:, periph]) * PERIPHERAL_DIM
        img = img.reshape(h, w)
        if contact is None:
            config = config or SuctionConfig.for_config(getattr(device_state, "config_id", "I"))
            contact = contact_state(scene, pose, config, radius_px=rc)
        if contact.deformation_mm.shape != (2 * rc + 1, 2 * rc + 1):
            raise ValueError("contact grid does not match the central-disk resolution")
        shade = synth_tactile_shading(contact.deformation_mm, contact.spacing_mm,
                                      contact_mask=contact.contact_mask)
        disk = contact.disk_mask
        win = img[cy - rc:cy + rc + 1, cx - rc:cx + rc + 1]
        win[disk] = shade[disk]
        pixels = _quantize(img)
    return Frame(width_px=w, height_px=h, pixels=pixels,
                 modality=Modality.TACTILE if led else Modality.VISION,
                 seq=int(seq), timestamp_us=int(timestamp_us), center_px=(cx, cy),
                 central_radius_px=rc, peripheral_outer_px=intr.peripheral_outer_px)


def tactile_density(intrinsics: CameraIntrinsics | None = None, cup=None) -> float:
    """Central-disk pixels per square centimetre of membrane."""
    from .physics import cup_config
    intr = intrinsics or CameraIntrinsics()
    cup = cup or cup_config("I")
    rc = intr.central_radius_px
    o = np.arange(-rc, rc + 1)
    count = int((o[None, :] ** 2 + o[:, None] ** 2 <= rc ** 2).sum())
    return count / (math.pi * cup.membrane_radius_cm ** 2)


def blank_contact(config: SuctionConfig | None, radius_px: int) -> ContactResult:
    return no_contact(config, radius_px)
