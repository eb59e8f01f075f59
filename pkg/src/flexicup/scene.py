"""Planar workspaces: obstacle boards, inclined plates and feasibility oracles.

Coordinates are in centimetres with the origin at the board corner. The height
grid is indexed ``heights[iy, ix]`` and cell ``(ix, iy)`` covers
``[ix*cell, (ix+1)*cell) x [iy*cell, (iy+1)*cell)``. Heights are millimetres.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

OBSTACLE_HEIGHT_MM = 5.0
_EPS = 1e-9


class SceneError(ValueError):
    pass


class BoundsError(SceneError):
    pass


@dataclass(frozen=True)
class Pose:
    x_cm: float
    y_cm: float
    z_cm: float = 0.0
    tilt_deg: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x_cm, self.y_cm, self.z_cm, self.tilt_deg)):
            raise SceneError(f"non-finite pose {self}")


@dataclass(frozen=True, eq=False)
class Scene:
    width_cm: float
    height_cm: float
    heights: np.ndarray
    cell_cm: float = 1.0
    incline_deg: float = 0.0
    target: tuple[float, float] = (0.0, 0.0)
    object_mass_kg: float = 0.0
    seed: int = 0
    # the whole board may rest on a stand; raises every surface point uniformly
    base_mm: float = 0.0

    def __post_init__(self):
        if self.width_cm <= 0 or self.height_cm <= 0 or self.cell_cm <= 0:
            raise SceneError("workspace extents and cell pitch must be positive")
        heights = np.array(self.heights, dtype=np.float64)
        expected = (math.ceil(self.height_cm / self.cell_cm - _EPS),
                    math.ceil(self.width_cm / self.cell_cm - _EPS))
        if heights.shape != expected:
            raise SceneError(f"heights grid {heights.shape} does not match extents {expected}")
        if (heights < 0).any():
            raise SceneError("negative surface height")
        if not 0.0 <= self.incline_deg <= 15.0:
            raise SceneError("incline must lie in [0, 15] degrees")
        if self.object_mass_kg < 0:
            raise SceneError("negative payload mass")
        if not (math.isfinite(self.base_mm) and self.base_mm >= 0):
            raise SceneError("board elevation must be finite and non-negative")
        tx, ty = self.target
        if not (0 <= tx <= self.width_cm and 0 <= ty <= self.height_cm):
            raise SceneError(f"target {self.target} outside workspace")
        heights.setflags(write=False)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "target", (float(tx), float(ty)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def obstacles(self) -> np.ndarray:
        return self.heights > 0

    def contains(self, x_cm: float, y_cm: float) -> bool:
        return 0.0 <= x_cm <= self.width_cm and 0.0 <= y_cm <= self.height_cm

    def plane_height_mm(self, x_cm):
        """Height of the bare (obstacle-free) board plane, incline and elevation included."""
        return self.base_mm + np.asarray(x_cm) * 10.0 * math.tan(math.radians(self.incline_deg))

    def to_dict(self) -> dict:
        return {
            "width_cm": self.width_cm,
            "height_cm": self.height_cm,
            "cell_cm": self.cell_cm,
            "incline_deg": self.incline_deg,
            "heights": self.heights.tolist(),
            "target": list(self.target),
            "object_mass_kg": self.object_mass_kg,
            "seed": self.seed,
            "base_mm": self.base_mm,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            width_cm=float(d["width_cm"]),
            height_cm=float(d["height_cm"]),
            heights=np.asarray(d["heights"], dtype=np.float64),
            cell_cm=float(d.get("cell_cm", 1.0)),
            incline_deg=float(d.get("incline_deg", 0.0)),
            target=tuple(d.get("target", (0.0, 0.0))),
            object_mass_kg=float(d.get("object_mass_kg", 0.0)),
            seed=int(d.get("seed", 0)),
            base_mm=float(d.get("base_mm", 0.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def with_changes(self, **kw) -> "Scene":
        d = dict(width_cm=self.width_cm, height_cm=self.height_cm, heights=self.heights,
                 cell_cm=self.cell_cm, incline_deg=self.incline_deg, target=self.target,
                 object_mass_kg=self.object_mass_kg, seed=self.seed, base_mm=self.base_mm)
        d.update(kw)
        return Scene(**d)


def grid_shape(width_cm: float, height_cm: float, cell_cm: float = 1.0) -> tuple[int, int]:
    return (math.ceil(height_cm / cell_cm - _EPS), math.ceil(width_cm / cell_cm - _EPS))


def obstacle_count(coverage: float, total_cells: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(coverage * total_cells + 0.5))


def generate_board(coverage: float, width_cm: float = 20.0, height_cm: float = 20.0,
                   seed: int = 0, *, cell_cm: float = 1.0, incline_deg: float = 0.0,
                   target=None, object_mass_kg: float = 0.2,
                   clustering: float = 1.0) -> Scene:
    """Random obstacle board with exactly ``round(coverage * cells)`` obstacle cells.

    Obstacles are the top-ranked cells of a seeded, Gaussian-smoothed noise
    field, so boards are spatially clustered like brick layouts and a board
    with higher coverage (same seed) contains every obstacle of a lower one.
    ``clustering`` is the smoothing length in cells; 0 gives i.i.d. cells.
    """
    if not (0.0 <= coverage <= 1.0) or not math.isfinite(coverage):
        raise SceneError(f"coverage must lie in [0, 1], got {coverage}")
    if cell_cm <= 0 or width_cm < 4 * cell_cm or height_cm < 4 * cell_cm:
        raise SceneError("extents must be at least 4 cells")
    ny, nx = grid_shape(width_cm, height_cm, cell_cm)
    rng = np.random.default_rng(seed)
    field_ = rng.standard_normal((ny, nx))
    if clustering > 0:
        field_ = gaussian_filter(field_, clustering, mode="reflect")
    order = np.argsort(-field_.ravel(), kind="stable")
    k = obstacle_count(coverage, nx * ny)
    heights = np.zeros(nx * ny)
    heights[order[:k]] = OBSTACLE_HEIGHT_MM
    if target is None:
        tx, ty = rng.uniform(0.15, 0.85, size=2) * (width_cm, height_cm)
        target = (round(float(tx), 3), round(float(ty), 3))
    return Scene(width_cm=float(width_cm), height_cm=float(height_cm),
                 heights=heights.reshape(ny, nx), cell_cm=float(cell_cm),
                 incline_deg=float(incline_deg), target=tuple(target),
                 object_mass_kg=float(object_mass_kg), seed=int(seed))


def flat_scene(width_cm: float = 20.0, height_cm: float = 20.0, *, incline_deg: float = 0.0,
               target=None, object_mass_kg: float = 0.2, cell_cm: float = 1.0, seed: int = 0) -> Scene:
    ny, nx = grid_shape(width_cm, height_cm, cell_cm)
    if target is None:
        target = (width_cm / 2, height_cm / 2)
    return Scene(width_cm=float(width_cm), height_cm=float(height_cm), heights=np.zeros((ny, nx)),
                 cell_cm=cell_cm, incline_deg=incline_deg, target=tuple(target),
                 object_mass_kg=object_mass_kg, seed=seed)


def surface_height(scene: Scene, x_cm: float, y_cm: float) -> float:
    """Surface height in mm at a point: cell height plus the (inclined, elevated) board plane."""
    if not scene.contains(x_cm, y_cm):
        raise BoundsError(f"point ({x_cm}, {y_cm}) outside {scene.width_cm}x{scene.height_cm} workspace")
    ny, nx = scene.shape
    ix = min(int(x_cm // scene.cell_cm), nx - 1)
    iy = min(int(y_cm // scene.cell_cm), ny - 1)
    return float(scene.heights[iy, ix] + scene.plane_height_mm(x_cm))


def surface_height_grid(scene: Scene, x_cm: np.ndarray, y_cm: np.ndarray) -> np.ndarray:
    """Vectorised surface height; points off the board get -inf."""
    x_cm = np.asarray(x_cm, dtype=np.float64)
    y_cm = np.asarray(y_cm, dtype=np.float64)
    ny, nx = scene.shape
    inside = (x_cm >= 0) & (x_cm <= scene.width_cm) & (y_cm >= 0) & (y_cm <= scene.height_cm)
    ix = np.clip(np.floor(x_cm / scene.cell_cm).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor(y_cm / scene.cell_cm).astype(np.int64), 0, ny - 1)
    h = scene.heights[iy, ix] + scene.plane_height_mm(x_cm)
    return np.where(inside, h, -np.inf)


def disk_cells(scene: Scene, x_cm: float, y_cm: float, radius_cm: float) -> np.ndarray:
    """Boolean (ny, nx) mask of cells whose area meets the open disk."""
    ny, nx = scene.shape
    c = scene.cell_cm
    x0 = np.arange(nx) * c
    y0 = np.arange(ny) * c
    dx = np.maximum.reduce([x0 - x_cm, np.zeros(nx), x_cm - (x0 + c)])
    dy = np.maximum.reduce([y0 - y_cm, np.zeros(ny), y_cm - (y0 + c)])
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    return d2 < radius_cm ** 2 - _EPS


def disk_obstructed(scene: Scene, x_cm: float, y_cm: float, radius_cm: float) -> bool:
    return bool((disk_cells(scene, x_cm, y_cm, radius_cm) & scene.obstacles).any())


def search_lattice(scene: Scene, radius_cm: float, step_cm: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Grid-aligned x and y coordinates whose footprint disk stays on the board."""
    step = scene.cell_cm if step_cm is None else step_cm

    def axis(extent):
        k = np.arange(0, int(math.floor(extent / step + _EPS)) + 1)
        v = np.round(k * step, 9)
        return v[(v - radius_cm >= -_EPS) & (v + radius_cm <= extent + _EPS)]

    return axis(scene.width_cm), axis(scene.height_cm)


def feasible_positions(scene: Scene, cup, step_cm: float | None = None) -> set[tuple[float, float]]:
    """Every lattice position whose rim disk covers only obstacle-free cells.

    Brute force over the lattice; each position is checked against every cell
    with an exact closest-point test.
    """
    r = cup.rim_outer_cm
    xs, ys = search_lattice(scene, r, step_cm)
    out = set()
    obstacles = scene.obstacles
    if not obstacles.any():
        return {(float(x), float(y)) for y in ys for x in xs}
    for y in ys:
        for x in xs:
            if not (disk_cells(scene, x, y, r) & obstacles).any():
                out.add((float(x), float(y)))
    return out


def window_board(seed: int = 0, window_cells: int = 4, width_cm: float = 20.0, height_cm: float = 20.0, *,
                 cell_cm: float = 1.0, object_mass_kg: float = 0.2) -> Scene:
    """Fully blocked board with one clear square window at a seeded location.

    Suitable regions are as sparse as possible, so a search has to traverse
    most of the board before it finds the window.
    """
    ny, nx = grid_shape(width_cm, height_cm, cell_cm)
    if not 0 < window_cells <= min(nx, ny):
        raise SceneError("window does not fit on the board")
    rng = np.random.default_rng(seed)
    ix = int(rng.integers(0, nx - window_cells + 1))
    iy = int(rng.integers(0, ny - window_cells + 1))
    heights = np.full((ny, nx), OBSTACLE_HEIGHT_MM)
    heights[iy:iy + window_cells, ix:ix + window_cells] = 0.0
    tx, ty = rng.uniform(0.15, 0.85, size=2) * (width_cm, height_cm)
    return Scene(width_cm=float(width_cm), height_cm=float(height_cm), heights=heights, cell_cm=float(cell_cm),
                 target=(round(float(tx), 3), round(float(ty), 3)), object_mass_kg=float(object_mass_kg),
                 seed=int(seed))
