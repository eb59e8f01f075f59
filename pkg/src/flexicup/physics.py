"""Contact, seal and holding-force model for vacuum and Bernoulli operation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.ndimage import gaussian_filter

from .scene import Pose, Scene, disk_obstructed, surface_height_grid
from .state import P_ATM_KPA, DeviceState

G = 9.81
# samples across the membrane radius; matches the camera's central-disk radius in pixels
TACTILE_RADIUS_PX = 280
RIM_SAMPLE_MM = 0.25


@dataclass(frozen=True)
class CupFootprint:
    membrane_radius_cm: float
    rim_inner_cm: float
    rim_outer_cm: float
    mode: str = "vacuum"
    config_id: str = "I"
    f_max_newton: float = 34.3
    provenance: str = "paper"

    def __post_init__(self):
        if self.mode not in ("vacuum", "bernoulli"):
            raise ValueError(f"unknown suction mode {self.mode!r}")
        if not (0 < self.membrane_radius_cm <= self.rim_inner_cm < self.rim_outer_cm):
            raise ValueError("need 0 < membrane radius <= rim inner < rim outer")
        if self.f_max_newton <= 0:
            raise ValueError("f_max_newton must be positive")


@lru_cache(maxsize=1)
def _registry_json() -> dict:
    return json.loads(resources.files("flexicup").joinpath("data/configs.json").read_text())


def load_registry(path=None) -> dict[str, CupFootprint]:
    """Configuration registry: config id -> CupFootprint."""
    raw = _registry_json() if path is None else json.loads(open(path).read())
    return {cid: CupFootprint(config_id=cid, **spec) for cid, spec in raw.items()}


def cup_config(config_id: str = "I") -> CupFootprint:
    try:
        return load_registry()[config_id]
    except KeyError:
        raise ValueError(f"unknown cup configuration {config_id!r}") from None


@dataclass(frozen=True)
class SuctionConfig:
    cup: CupFootprint = field(default_factory=cup_config)
    p_atm_kpa: float = P_ATM_KPA
    vacuum_dp_kpa: float = 48.5
    bernoulli_k: float = 2.5  # N*mm; saturates F_max of config III at zero gap
    seal_gap_tolerance_mm: float = 1.0
    seal_threshold: float = 0.9
    max_indent_mm: float = 2.0
    sigma_membrane_mm: float = 1.5
    contact_eps_mm: float = 0.05
    gap0_mm: float = 0.5
    # unloaded membrane bulges this far below the rim plane
    protrusion_mm: float = 0.25

    def __post_init__(self):
        if self.p_atm_kpa <= 0:
            raise ValueError("p_atm_kpa must be positive")
        if not 0 < self.seal_threshold < 1:
            raise ValueError("seal_threshold must lie in (0, 1)")
        if self.seal_gap_tolerance_mm <= 0 or self.max_indent_mm <= 0:
            raise ValueError("tolerances must be positive")

    @classmethod
    def for_config(cls, config_id: str = "I", **kw) -> "SuctionConfig":
        return cls(cup=cup_config(config_id), **kw)


@dataclass(frozen=True, eq=False)
class ContactResult:
    contact_mask: np.ndarray
    deformation_mm: np.ndarray
    seal_quality: float
    rim_contact_fraction: float
    gap_mm: float
    spacing_mm: float
    obstructed: bool = False
    flat_support: bool = False

    @property
    def disk_mask(self) -> np.ndarray:
        return _disk_mask(self.deformation_mm.shape[0] // 2)


@lru_cache(maxsize=16)
def _disk_mask(radius_px: int) -> np.ndarray:
    o = np.arange(-radius_px, radius_px + 1)
    m = o[None, :] ** 2 + o[:, None] ** 2 <= radius_px ** 2
    m.setflags(write=False)
    return m


@lru_cache(maxsize=16)
def _annulus_samples(rim_inner_mm: float, rim_outer_mm: float, spacing: float):
    n = int(math.ceil(rim_outer_mm / spacing))
    o = (np.arange(-n, n + 1)) * spacing
    u, v = np.meshgrid(o, o)
    r = np.hypot(u, v)
    keep = (r >= rim_inner_mm) & (r <= rim_outer_mm)
    return u[keep], v[keep]


def _cup_to_world(pose: Pose, u_mm, v_mm):
    """Map cup-frame offsets (mm) on the rim plane to world x, y (cm) and height (mm)."""
    th = math.radians(pose.tilt_deg)
    x = pose.x_cm + u_mm * math.cos(th) / 10.0
    y = pose.y_cm + v_mm / 10.0
    z = pose.z_cm * 10.0 + u_mm * math.sin(th)
    return x, y, z


def contact_state(scene: Scene, pose: Pose, config: SuctionConfig | None = None,
                  radius_px: int = TACTILE_RADIUS_PX) -> ContactResult:
    """Membrane deformation and rim seal for the cup held at ``pose``.

    The deformation grid has ``2*radius_px + 1`` samples per side spanning the
    membrane diameter; samples outside the membrane disk are zero.
    """
    config = config or SuctionConfig()
    cup = config.cup
    r_mm = cup.membrane_radius_cm * 10.0
    spacing = r_mm / radius_px
    disk = _disk_mask(radius_px)
    o = np.arange(-radius_px, radius_px + 1) * spacing
    u, v = np.meshgrid(o, o)
    x, y, rim_z = _cup_to_world(pose, u, v)
    surf = surface_height_grid(scene, x, y)
    raw = np.clip(surf - (rim_z - config.protrusion_mm), 0.0, config.max_indent_mm)
    raw = np.where(disk & np.isfinite(raw), raw, 0.0)
    sigma = config.sigma_membrane_mm / spacing
    deformation = gaussian_filter(raw, sigma, mode="constant") if sigma > 0 else raw
    deformation = np.where(disk, np.maximum(deformation, 0.0), 0.0)
    # touching where the surface actually intrudes; smoothing only shapes the membrane
    contact = (raw > config.contact_eps_mm) & (deformation > 0.0)

    ru, rv = _annulus_samples(cup.rim_inner_cm * 10.0, cup.rim_outer_cm * 10.0, RIM_SAMPLE_MM)
    rx, ry, rz = _cup_to_world(pose, ru, rv)
    rsurf = surface_height_grid(scene, rx, ry)
    on_board = np.isfinite(rsurf)
    gaps = np.where(on_board, np.maximum(rz - rsurf, 0.0), np.inf)
    sealed = gaps <= config.seal_gap_tolerance_mm
    rim_fraction = float(sealed.mean()) if gaps.size else 0.0
    gap_mm = float(np.mean(np.minimum(gaps, 50.0))) if gaps.size else 50.0

    obstructed = disk_obstructed(scene, pose.x_cm, pose.y_cm, cup.rim_outer_cm)
    seal = 0.0 if obstructed or gap_mm > config.seal_gap_tolerance_mm else rim_fraction
    flat_support = bool(on_board.all()) and not obstructed
    return ContactResult(contact_mask=contact, deformation_mm=deformation, seal_quality=seal,
                         rim_contact_fraction=rim_fraction, gap_mm=gap_mm, spacing_mm=spacing,
                         obstructed=obstructed, flat_support=flat_support)


def no_contact(config: SuctionConfig | None = None, radius_px: int = TACTILE_RADIUS_PX) -> ContactResult:
    config = config or SuctionConfig()
    n = 2 * radius_px + 1
    return ContactResult(contact_mask=np.zeros((n, n), bool), deformation_mm=np.zeros((n, n)),
                         seal_quality=0.0, rim_contact_fraction=0.0, gap_mm=50.0,
                         spacing_mm=config.cup.membrane_radius_cm * 10.0 / radius_px)


def holding_force(contact: ContactResult, config: SuctionConfig | None = None,
                  valve_open: bool = True) -> float:
    """Holding force in newtons."""
    config = config or SuctionConfig()
    cup = config.cup
    if not valve_open:
        return 0.0
    if cup.mode == "vacuum":
        return cup.f_max_newton * float(np.clip(contact.seal_quality, 0.0, 1.0))
    if not contact.flat_support:
        return 0.0
    return min(cup.f_max_newton, config.bernoulli_k / (contact.gap_mm + config.gap0_mm))


def chamber_pressure(force_n: float, config: SuctionConfig) -> float:
    return config.p_atm_kpa - config.vacuum_dp_kpa * force_n / config.cup.f_max_newton


def attach_update(scene: Scene, state: DeviceState, contact: ContactResult,
                  config: SuctionConfig | None = None) -> DeviceState:
    """Attachment decision for the contact currently under (or held by) the cup."""
    config = config or SuctionConfig.for_config(state.config_id)
    force = holding_force(contact, config, state.valve_open)
    weight = scene.object_mass_kg * G
    attached = (state.valve_open and contact.seal_quality >= config.seal_threshold
                and force >= weight)
    return replace(state, attached=bool(attached), pressure_kpa=chamber_pressure(force, config))
