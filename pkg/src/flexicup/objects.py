"""Synthetic object library for classification: appearance, texture, features.

Each archetype has a peripheral appearance (base gray level, contrast and a
pattern) and a tactile texture (a membrane height field). Some archetypes
share an appearance and others share a texture, so neither modality alone
separates the whole library.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.ndimage import gaussian_filter

from .sensor import PERIPHERAL_DIM, CameraIntrinsics, Frame, Modality, synth_tactile_shading

# classification renders use a half-resolution camera; features are scale-free
LIBRARY_DOWNSCALE = 2
MEMBRANE_RADIUS_MM = 11.4
PIXEL_NOISE = 2.0
VISION_BINS = 32
ORIENT_BINS = 8
MAG_EDGES = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, np.inf)
REFERENCE_RENDERS = 4


@dataclass(frozen=True)
class Archetype:
    id: str
    vision: dict
    tactile: dict


class ObjectLibrary:
    def __init__(self, archetypes: list[Archetype], intrinsics: CameraIntrinsics | None = None):
        if not archetypes:
            raise ValueError("empty object library")
        ids = [a.id for a in archetypes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate archetype ids")
        self.archetypes = {a.id: a for a in archetypes}
        self.labels = tuple(sorted(ids))
        self.intrinsics = intrinsics or CameraIntrinsics().scaled(LIBRARY_DOWNSCALE)
        self._centroids = None

    @classmethod
    def load(cls, path=None) -> "ObjectLibrary":
        if path is None:
            text = resources.files("flexicup").joinpath("data/objects.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        raw = json.loads(text)
        return cls([Archetype(a["id"], a["vision"], a["tactile"]) for a in raw["archetypes"]])

    def get(self, object_id: str) -> Archetype:
        try:
            return self.archetypes[object_id]
        except KeyError:
            raise ValueError(f"unknown object fixture {object_id!r}") from None

    def render(self, object_id: str, variation: int = 0, seed: int = 0) -> tuple[Frame, Frame]:
        """(vision frame, tactile frame) of one rendered variation of an archetype."""
        arch = self.get(object_id)
        rng = np.random.default_rng([seed, variation, self.labels.index(object_id)])
        return render_object_frames(arch, self.intrinsics, rng)

    def centroids(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-label mean vision and tactile features over reference renders."""
        if self._centroids is None:
            vis, tac = [], []
            for label in self.labels:
                fv, ft = [], []
                for k in range(REFERENCE_RENDERS):
                    v, t = self.render(label, variation=k, seed=10_000)
                    fv.append(vision_features(v))
                    ft.append(tactile_features(t))
                vis.append(np.mean(fv, axis=0))
                tac.append(np.mean(ft, axis=0))
            self._centroids = (np.array(vis), np.array(tac))
        return self._centroids


@lru_cache(maxsize=1)
def default_library() -> ObjectLibrary:
    return ObjectLibrary.load()


# --- rendering ------------------------------------------------------------

def _appearance(spec: dict, xx, yy, rng) -> np.ndarray:
    base = spec["base"] + rng.uniform(-3, 3)
    c = spec["contrast"]
    s = spec["scale_px"]
    ang = rng.uniform(0, math.pi)
    u = xx * math.cos(ang) + yy * math.sin(ang)
    v = -xx * math.sin(ang) + yy * math.cos(ang)
    phase = rng.uniform(0, 2 * math.pi, size=2)
    pattern = spec["pattern"]
    if pattern == "smooth":
        extent = max(float(np.abs(u).max()), 1.0)
        img = base + c * u / extent
    elif pattern == "spots":
        img = base + c * np.cos(2 * math.pi * u / s + phase[0]) * np.cos(2 * math.pi * v / s + phase[1])
    elif pattern == "stripes":
        img = base + c * np.sign(np.sin(2 * math.pi * u / s + phase[0]))
    elif pattern == "speckle":
        n = gaussian_filter(rng.standard_normal(xx.shape), s)
        img = base + c * n / max(float(n.std()), 1e-9)
    else:
        raise ValueError(f"unknown appearance pattern {pattern!r}")
    return img


def _scatter_bumps(u, v, centres, sigma, amp):
    """Sum of Gaussian bumps, built by splatting impulses and blurring once."""
    step = float(u[0, 1] - u[0, 0])
    n = u.shape[0]
    imp = np.zeros_like(u)
    c = np.asarray(centres, dtype=np.float64).reshape(-1, 2)
    # nearest grid sample of each centre
    col = np.rint((c[:, 0] - u[0, 0]) / step).astype(int)
    row = np.rint((c[:, 1] - v[0, 0]) / step).astype(int)
    ok = (col >= 0) & (col < n) & (row >= 0) & (row < n)
    np.add.at(imp, (row[ok], col[ok]), 1.0)
    s = sigma / step
    return amp * 2 * math.pi * s * s * gaussian_filter(imp, s, mode="constant", truncate=3.0)


def _rotate(points, ang):
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ang), math.sin(ang)
    return np.stack([p[:, 0] * c - p[:, 1] * s, p[:, 0] * s + p[:, 1] * c], axis=1)


def texture_height(spec: dict, u, v, rng) -> np.ndarray:
    """Membrane indentation (mm) for a tactile texture at membrane coords ``u, v`` (mm)."""
    R = MEMBRANE_RADIUS_MM
    press = spec.get("press_mm", 0.6) * rng.uniform(0.9, 1.1)
    h = np.full_like(u, press)
    ang = rng.uniform(-0.15, 0.15)
    ur = u * math.cos(ang) + v * math.sin(ang)
    vr = -u * math.sin(ang) + v * math.cos(ang)
    shift = rng.uniform(0, 1, size=2)
    tex = spec["texture"]
    if tex == "flat":
        pass
    elif tex == "ridged":
        h += 0.25 * np.cos(2 * math.pi * (ur / 1.8 + shift[0]))
    elif tex == "grid":
        p = 2.0
        h += 0.25 * np.maximum(np.cos(2 * math.pi * (ur / p + shift[0])),
                               np.cos(2 * math.pi * (vr / p + shift[1]))) ** 8
    elif tex == "dimple":
        p = 1.6
        ks = np.arange(-8, 9)
        centres = [((i + 0.5 * (j % 2) + shift[0]) * p, (j * 0.866 + shift[1]) * p) for i in ks for j in ks]
        centres = [c for c in centres if abs(c[0]) < R + 1 and abs(c[1]) < R + 1]
        h -= _scatter_bumps(u, v, _rotate(centres, ang), 0.3, 0.3)
    elif tex == "pebble":
        n = 40
        centres = rng.uniform(-R, R, size=(n, 2))
        h += _scatter_bumps(u, v, centres, 0.9, 0.35)
    elif tex == "porous":
        field = gaussian_filter(rng.standard_normal(u.shape), 0.35 / (u[0, 1] - u[0, 0]))
        field /= max(float(field.std()), 1e-9)
        h -= 0.35 * (field > 1.0)
        h = gaussian_filter(h, 0.08 / (u[0, 1] - u[0, 0]))
    elif tex == "bristle":
        n = 600
        centres = rng.uniform(-R, R, size=(n, 2))
        h += _scatter_bumps(u, v, centres, 0.12, 0.5)
    else:
        raise ValueError(f"unknown tactile texture {tex!r}")
    return np.maximum(h, 0.0)


def render_object_frames(arch: Archetype, intrinsics: CameraIntrinsics, rng) -> tuple[Frame, Frame]:
    w, hgt = intrinsics.width_px, intrinsics.height_px
    cx, cy = intrinsics.center_px
    rc, ro = intrinsics.central_radius_px, intrinsics.peripheral_outer_px
    jj, ii = np.meshgrid(np.arange(w) - cx, np.arange(hgt) - cy)
    r = np.hypot(jj, ii)
    lens = r <= ro
    scene = _appearance(arch.vision, jj.astype(float), ii.astype(float), rng)
    scene = scene + rng.normal(0.0, PIXEL_NOISE, size=scene.shape)
    vis = np.where(lens, scene, 0.0)

    o = np.arange(-rc, rc + 1) * (MEMBRANE_RADIUS_MM / rc)
    u, v = np.meshgrid(o, o)
    disk = u ** 2 + v ** 2 <= MEMBRANE_RADIUS_MM ** 2
    height = np.where(disk, texture_height(arch.tactile, u, v, rng), 0.0)
    shade = synth_tactile_shading(height, MEMBRANE_RADIUS_MM / rc, contact_mask=disk & (height > 0))
    shade = shade + rng.normal(0.0, PIXEL_NOISE, size=shade.shape)
    tac = np.where(lens & (r > rc), scene * PERIPHERAL_DIM, 0.0)
    win = tac[cy - rc:cy + rc + 1, cx - rc:cx + rc + 1]
    win[disk] = shade[disk]

    def frame(img, mod):
        px = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        return Frame(width_px=w, height_px=hgt, pixels=px, modality=mod, seq=0, timestamp_us=0,
                     center_px=(cx, cy), central_radius_px=rc, peripheral_outer_px=ro)

    return frame(vis, Modality.VISION), frame(tac, Modality.TACTILE)


# --- features ---------------------------------------------------------------

def vision_features(frame: Frame) -> np.ndarray:
    """Normalised intensity histogram of the peripheral annulus."""
    vals = frame.pixels[frame.peripheral_mask()]
    hist, _ = np.histogram(vals, bins=VISION_BINS, range=(0, 256))
    return hist / max(1, vals.size)


def tactile_features(frame: Frame) -> np.ndarray:
    """Orientation and magnitude histograms of the tactile shading gradient."""
    crop = frame.central_crop().astype(np.float64)
    rc = frame.central_radius_px
    o = np.arange(-rc, rc + 1)
    inner = o[None, :] ** 2 + o[:, None] ** 2 <= (rc - 2) ** 2
    gy, gx = np.gradient(crop)
    mag = np.hypot(gx, gy)[inner]
    ori = np.mod(np.arctan2(gy, gx)[inner], math.pi)
    ohist, _ = np.histogram(ori, bins=ORIENT_BINS, range=(0, math.pi), weights=mag)
    ohist = ohist / max(float(mag.sum()), 1e-12)
    mhist, _ = np.histogram(mag, bins=np.array(MAG_EDGES))
    return np.concatenate([ohist, mhist / mag.size])
