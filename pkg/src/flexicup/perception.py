"""Classical frame operators: target detection, contact segmentation, edge hints.

All functions are pure and act on :class:`~flexicup.sensor.Frame` objects.
Each one checks the frame modality first, so feeding a tactile image to a
vision operator (or the reverse) fails loudly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .sensor import MARKER_VALUE, OBSTACLE_VALUE, TACTILE_AMBIENT, Frame, Modality

MARKER_BAND = 10
MIN_BLOB_PX = 20
CONTACT_DELTA = 15
# mean intensity gradient (levels/px) below which the view counts as featureless
EDGE_MIN_GRADIENT = 0.05

DIRECTIONS = {"+x": (1, 0), "-x": (-1, 0), "+y": (0, 1), "-y": (0, -1)}


class ModalityError(ValueError):
    """A frame of the wrong modality reached an operator."""


def _require(frame: Frame, modality: Modality, op: str):
    if frame.modality != modality:
        raise ModalityError(f"{op} needs a {modality.name.lower()} frame, got {frame.modality.name.lower()}")


@dataclass(frozen=True)
class DetectionResult:
    found: bool
    bearing_rad: float | None = None
    offset_norm: float = 0.0
    centroid_px: tuple[float, float] | None = None
    area_px: int = 0

    def __post_init__(self):
        if self.found == (self.bearing_rad is None):
            raise ValueError("bearing is defined exactly when the target is found")
        if not 0.0 <= self.offset_norm <= 1.0:
            raise ValueError("offset_norm must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class ContactSegmentation:
    mask: np.ndarray
    coverage: float
    flatness: float


def detect_target(frame: Frame, region: str = "peripheral") -> DetectionResult:
    """Locate the marker blob by its gray band and return its bearing.

    ``region`` selects the pixels searched: the peripheral annulus, or the
    whole lens ("lens"), which also covers the central disk while the LED is
    off. The bearing follows the cup frame (columns +x, rows +y).
    """
    _require(frame, Modality.VISION, "detect_target")
    if region == "peripheral":
        zone = frame.peripheral_mask()
    elif region == "lens":
        zone = frame.lens_mask()
    else:
        raise ValueError(f"unknown detection region {region!r}")
    px = frame.pixels.astype(np.int16)
    blob = zone & (np.abs(px - MARKER_VALUE) <= MARKER_BAND)
    area = int(blob.sum())
    if area < MIN_BLOB_PX:
        return DetectionResult(found=False, area_px=area)
    rows, cols = np.nonzero(blob)
    cx, cy = frame.center_px
    dx, dy = cols.mean() - cx, rows.mean() - cy
    offset = min(1.0, math.hypot(dx, dy) / frame.peripheral_outer_px)
    return DetectionResult(found=True, bearing_rad=math.atan2(dy, dx), offset_norm=offset,
                           centroid_px=(float(cols.mean()), float(rows.mean())), area_px=area)


def _central_pixels(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    crop = frame.central_crop().astype(np.float64)
    r = frame.central_radius_px
    o = np.arange(-r, r + 1)
    disk = o[None, :] ** 2 + o[:, None] ** 2 <= r * r
    return crop, disk


def segment_contact(frame: Frame, baseline: float | np.ndarray = TACTILE_AMBIENT,
                    delta: float = CONTACT_DELTA) -> ContactSegmentation:
    """Contact mask from deviation against the no-contact tactile image.

    Flatness is one minus the squared coefficient of variation of the
    contact signal (pixel minus baseline) inside the mask, clipped to [0, 1].
    """
    _require(frame, Modality.TACTILE, "segment_contact")
    crop, disk = _central_pixels(frame)
    signal = crop - baseline
    mask = disk & (np.abs(signal) > delta)
    n = int(mask.sum())
    coverage = n / int(disk.sum())
    if n < 2:
        return ContactSegmentation(mask=mask, coverage=coverage, flatness=1.0 if n else 0.0)
    s = signal[mask]
    mean = float(np.mean(np.abs(s)))
    flatness = 1.0 - min(1.0, float(np.var(s)) / (mean * mean))
    return ContactSegmentation(mask=mask, coverage=coverage, flatness=max(0.0, flatness))


def edge_step_hint(frame: Frame, default: str = "+x", min_gradient: float = EDGE_MIN_GRADIENT) -> str:
    """Step direction pointing away from dark (occupied) structure.

    The intensity gradient averaged over the central disk points from
    obstacles toward clear board, so its dominant axis names the clearer
    side. A featureless view (all clear or all blocked) yields ``default``.
    """
    _require(frame, Modality.VISION, "edge_step_hint")
    if default not in DIRECTIONS:
        raise ValueError(f"unknown direction {default!r}")
    crop, disk = _central_pixels(frame)
    gy, gx = np.gradient(crop)
    # ignore the disk's own outline
    inner = disk.copy()
    inner[1:-1, 1:-1] &= disk[:-2, 1:-1] & disk[2:, 1:-1] & disk[1:-1, :-2] & disk[1:-1, 2:]
    inner[0, :] = inner[-1, :] = inner[:, 0] = inner[:, -1] = False
    mx = float(gx[inner].mean())
    my = float(gy[inner].mean())
    if max(abs(mx), abs(my)) < min_gradient:
        return default
    if abs(mx) >= abs(my):
        return "+x" if mx > 0 else "-x"
    return "+y" if my > 0 else "-y"


def footprint_blocked(frame: Frame, ground_radius_cm: float, camera_height_cm: float,
                      band: int = 10) -> bool:
    """True when obstacle-coloured pixels fall within ``ground_radius_cm`` of the axis.

    Geometry assumes a level board seen straight down from
    ``camera_height_cm``: ground radius rho maps to fisheye radius
    f * atan(rho / h).
    """
    _require(frame, Modality.VISION, "footprint_blocked")
    if ground_radius_cm <= 0 or camera_height_cm <= 0:
        return False
    f = frame.peripheral_outer_px / (math.pi / 2)
    r_px = f * math.atan(ground_radius_cm / camera_height_cm)
    near = frame.radius_map() <= r_px
    return bool((near & (np.abs(frame.pixels.astype(np.int16) - OBSTACLE_VALUE) <= band)).any())


class Fusion(str, Enum):
    VISION_ONLY = "vision"
    TACTILE_ONLY = "tactile"
    FUSED = "fused"


@dataclass(frozen=True)
class Classification:
    label: str
    scores: np.ndarray  # aligned with ``labels``
    labels: tuple[str, ...]


def _scores(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((centroids - features) ** 2).sum(axis=1)
    # temperature from the spread between distinct centroids
    diffs = ((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    pos = diffs[diffs > 1e-12]
    tau = 0.1 * float(np.median(pos)) if pos.size else 1.0
    z = -(d2 - d2.min()) / tau
    e = np.exp(z)
    return e / e.sum()


def classify_object(vision_frame: Frame | None, tactile_frame: Frame | None,
                    fusion: Fusion | str = Fusion.FUSED, library=None) -> Classification:
    """Nearest-centroid classification on handcrafted features.

    Vision uses the peripheral intensity histogram, touch the shading
    gradient histograms. Fused adds the two normalised score vectors. Exact
    ties go to the lexicographically smallest label.
    """
    from .objects import default_library, tactile_features, vision_features
    fusion = Fusion(fusion)
    lib = library or default_library()
    cv, ct = lib.centroids()
    total = np.zeros(len(lib.labels))
    if fusion in (Fusion.VISION_ONLY, Fusion.FUSED):
        if vision_frame is None:
            raise ValueError("vision frame required")
        _require(vision_frame, Modality.VISION, "classify_object")
        total += _scores(vision_features(vision_frame), cv)
    if fusion in (Fusion.TACTILE_ONLY, Fusion.FUSED):
        if tactile_frame is None:
            raise ValueError("tactile frame required")
        _require(tactile_frame, Modality.TACTILE, "classify_object")
        total += _scores(tactile_features(tactile_frame), ct)
    total /= total.sum()
    best = total.max()
    # labels are sorted, so the first maximum is the lexicographic winner
    label = lib.labels[int(np.flatnonzero(total == best)[0])]
    return Classification(label=label, scores=total, labels=lib.labels)
