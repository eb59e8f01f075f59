"""Perception-driven grasp state machine and the episode runner.

``controller_step`` is a pure transition function: it consumes the frame and
device state produced by the previous command and returns the next command
batch (a tuple of primitive commands, possibly empty) with the new controller
state. ``run_episode`` drives it against a device-link endpoint.

Every phase declares the modality of the frame it consumes; the LED is only
switched on entering tactile verification and off when ascending, and the
valve only opens in Attach.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

from .client import CommandError, DeviceClient, SessionError
from .perception import DIRECTIONS, detect_target, edge_step_hint, footprint_blocked, segment_contact
from .physics import CupFootprint, cup_config
from .scene import Scene, search_lattice
from .sensor import CameraIntrinsics, Frame, Modality
from .state import DeviceState

log = logging.getLogger(__name__)


class Phase(str, Enum):
    APPROACH = "Approach"
    DESCEND = "Descend"
    TACTILE_VERIFY = "TactileVerify"
    ASCEND = "Ascend"
    STEP_SEARCH = "StepSearch"
    BOUNDARY_ADJUST = "BoundaryAdjust"
    ATTACH = "Attach"
    LIFT = "Lift"
    TRANSPORT = "Transport"
    PLACE = "Place"
    DONE = "Done"
    FAIL = "Fail"


class FailureReason(str, Enum):
    NONE = "None"
    SEARCH_EXHAUSTED = "SearchExhausted"
    ATTACH_FAILED = "AttachFailed"
    DROP_DURING_TRANSPORT = "DropDuringTransport"
    TIMEOUT = "Timeout"


V, T = Modality.VISION, Modality.TACTILE
# modality of the frame each phase consumes
PHASE_MODALITY = {
    Phase.APPROACH: V, Phase.DESCEND: V, Phase.STEP_SEARCH: V, Phase.BOUNDARY_ADJUST: V,
    Phase.TACTILE_VERIFY: T, Phase.ATTACH: T, Phase.ASCEND: T,
    Phase.LIFT: T, Phase.TRANSPORT: T, Phase.PLACE: T,
}
TRANSITIONS = {
    Phase.APPROACH: {Phase.APPROACH, Phase.DESCEND},
    Phase.DESCEND: {Phase.TACTILE_VERIFY, Phase.STEP_SEARCH},
    Phase.TACTILE_VERIFY: {Phase.ATTACH, Phase.ASCEND},
    Phase.ATTACH: {Phase.ATTACH, Phase.LIFT, Phase.ASCEND, Phase.FAIL},
    Phase.ASCEND: {Phase.STEP_SEARCH},
    Phase.STEP_SEARCH: {Phase.DESCEND, Phase.BOUNDARY_ADJUST, Phase.FAIL},
    Phase.BOUNDARY_ADJUST: {Phase.DESCEND, Phase.FAIL},
    Phase.LIFT: {Phase.TRANSPORT, Phase.FAIL},
    Phase.TRANSPORT: {Phase.PLACE, Phase.FAIL},
    Phase.PLACE: {Phase.DONE, Phase.FAIL},
    Phase.DONE: set(),
    Phase.FAIL: set(),
}
TERMINAL = (Phase.DONE, Phase.FAIL)
# nominal period between controller steps, used to timestamp records
CONTROL_DT_S = 0.1


class ControllerError(RuntimeError):
    """Contract violation inside the controller loop (a bug, not a grasp failure)."""


@dataclass(frozen=True)
class ControllerParams:
    step_cm: float = 1.0
    coverage_min: float = 0.8
    flatness_min: float = 0.7
    # search altitude of the rim plane above the bare board
    search_clearance_cm: float = 1.0
    approach_tol: float = 0.05
    approach_iters: int = 8
    lift_cm: float = 2.0
    transport_cm: float = 5.0
    # skip descending where vision already shows an obstacle under the rim
    prescreen: bool = True
    prescreen_margin_cm: float = 0.05
    max_attach_attempts: int | None = None
    camera_fps: float = 1000.0
    camera_downscale: int = 4
    timeout_s: float = 120.0


@dataclass(frozen=True, eq=False)
class SearchWorld:
    """What the controller knows about the workspace: the board geometry and its lattice."""
    scene: Scene
    cup: CupFootprint
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    camera_height_cm: float = 1.5
    search_clearance_cm: float = 1.0

    @classmethod
    def build(cls, scene: Scene, cup: CupFootprint, step_cm: float, camera_height_cm: float = 1.5,
              search_clearance_cm: float = 1.0):
        xs, ys = search_lattice(scene, cup.rim_outer_cm, step_cm)
        return cls(scene, cup, tuple(float(x) for x in xs), tuple(float(y) for y in ys),
                   camera_height_cm, search_clearance_cm)

    @property
    def size(self) -> int:
        return len(self.xs) * len(self.ys)

    @cached_property
    def positions(self) -> frozenset:
        return frozenset((x, y) for x in self.xs for y in self.ys)

    def on_lattice(self, p) -> bool:
        return p in self.positions

    def snap(self, x: float, y: float) -> tuple[float, float]:
        if not self.xs or not self.ys:
            raise ControllerError("the cup does not fit on the board")
        return min(self.xs, key=lambda v: (abs(v - x), v)), min(self.ys, key=lambda v: (abs(v - y), v))

    def neighbour(self, p, direction: str, step: float):
        dx, dy = DIRECTIONS[direction]
        q = (round(p[0] + dx * step, 9), round(p[1] + dy * step, 9))
        return q if self.on_lattice(q) else None

    def plane_z_cm(self, x: float) -> float:
        return self.scene.plane_height_mm(x) / 10.0

    def contact_z_cm(self, p) -> float:
        from .scene import surface_height
        return surface_height(self.scene, p[0], p[1]) / 10.0

    def search_z_cm(self, p) -> float:
        return self.plane_z_cm(p[0]) + self.search_clearance_cm


@dataclass(frozen=True, eq=False)
class ControllerState:
    phase: Phase
    world: SearchWorld
    params: ControllerParams = field(default_factory=ControllerParams)
    visited: frozenset = frozenset()
    step_cm: float = 1.0
    serpentine_dir: str = "+x"
    row_dir: str = "+y"
    budget: int = 0
    position: tuple[float, float] | None = None
    steps_taken: int = 0
    approach_iters: int = 0
    attach_stage: int = 0
    attach_attempts: int = 0
    place: tuple[float, float] | None = None
    failure_reason: FailureReason = FailureReason.NONE
    note: str = ""

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL


def initial_state(scene: Scene, cup: CupFootprint | str = "I", params: ControllerParams | None = None,
                  camera_height_cm: float = 1.5) -> ControllerState:
    params = params or ControllerParams()
    cup = cup_config(cup) if isinstance(cup, str) else cup
    world = SearchWorld.build(scene, cup, params.step_cm, camera_height_cm, params.search_clearance_cm)
    return ControllerState(phase=Phase.APPROACH, world=world, params=params, step_cm=params.step_cm,
                           budget=world.size)


def _go(cs: ControllerState, phase: Phase, **kw) -> ControllerState:
    if phase not in TRANSITIONS[cs.phase]:
        raise ControllerError(f"illegal transition {cs.phase.value} -> {phase.value}")
    return replace(cs, phase=phase, **kw)


def _fail(cs: ControllerState, reason: FailureReason, note: str = "") -> ControllerState:
    return _go(cs, Phase.FAIL, failure_reason=reason, note=note)


def _move(p, z, tilt=0.0):
    return ("move", float(p[0]), float(p[1]), float(z), float(tilt))


def _verified(frame: Frame, params: ControllerParams) -> bool:
    seg = segment_contact(frame)
    return seg.coverage >= params.coverage_min and seg.flatness >= params.flatness_min


def _target_ground_offset(frame: Frame, det, camera_height_cm: float) -> tuple[float, float]:
    """Board-plane offset (cm) of a detected blob, inverting the equidistant projection."""
    cx, cy = frame.center_px
    ux, uy = det.centroid_px
    f = frame.peripheral_outer_px / (math.pi / 2)
    theta = min(math.hypot(ux - cx, uy - cy) / f, math.radians(80))
    rho = camera_height_cm * math.tan(theta)
    return rho * math.cos(det.bearing_rad), rho * math.sin(det.bearing_rad)


def _enter_position(cs: ControllerState, q, phase_after=Phase.DESCEND) -> tuple[tuple, ControllerState]:
    cs = _go(cs, phase_after, position=q, visited=cs.visited | {q}, budget=cs.budget - 1,
             steps_taken=cs.steps_taken + 1)
    return (_move(q, cs.world.search_z_cm(q)),), cs


def _nearest_unvisited(cs: ControllerState):
    w = cs.world
    px, py = cs.position
    best = None
    for y in w.ys:
        for x in w.xs:
            if (x, y) in cs.visited:
                continue
            key = ((x - px) ** 2 + (y - py) ** 2, y, x)
            if best is None or key < best[0]:
                best = (key, (x, y))
    return None if best is None else best[1]


def _search_step(cs: ControllerState, frame: Frame) -> tuple[tuple, ControllerState]:
    w = cs.world
    if cs.budget <= 0 or len(cs.visited) >= w.size:
        return (), _fail(cs, FailureReason.SEARCH_EXHAUSTED)
    hint = edge_step_hint(frame, default=cs.serpentine_dir)
    for d in dict.fromkeys((hint, cs.serpentine_dir)):
        q = w.neighbour(cs.position, d, cs.step_cm)
        if q is not None and q not in cs.visited:
            return _enter_position(cs, q)
    return (), _go(cs, Phase.BOUNDARY_ADJUST)


def controller_step(cs: ControllerState, frame: Frame, dstate: DeviceState) -> tuple[tuple, ControllerState]:
    """Advance the state machine by one observation."""
    if cs.terminal:
        return (), cs
    want = PHASE_MODALITY[cs.phase]
    if frame.modality != want:
        raise ControllerError(f"{cs.phase.value} expects a {want.name.lower()} frame, "
                              f"got {frame.modality.name.lower()}")
    p = cs.params
    w = cs.world
    ph = cs.phase

    if ph is Phase.APPROACH:
        here = (dstate.x_cm, dstate.y_cm)
        det = detect_target(frame, region="lens")
        if det.found and det.offset_norm >= p.approach_tol and cs.approach_iters < p.approach_iters:
            cam_h = dstate.z_cm + w.camera_height_cm - w.plane_z_cm(dstate.x_cm)
            dx, dy = _target_ground_offset(frame, det, cam_h)
            x = min(max(here[0] + dx, 0.0), w.scene.width_cm)
            y = min(max(here[1] + dy, 0.0), w.scene.height_cm)
            return (_move((x, y), dstate.z_cm),), replace(cs, approach_iters=cs.approach_iters + 1)
        q = w.snap(*here)
        cs = _go(cs, Phase.DESCEND, position=q, visited=cs.visited | {q}, budget=cs.budget - 1)
        return (_move(q, w.search_z_cm(q)),), cs

    if ph is Phase.DESCEND:
        q = cs.position
        if p.prescreen:
            cam_h = dstate.z_cm + w.camera_height_cm - w.plane_z_cm(q[0])
            if footprint_blocked(frame, w.cup.rim_outer_cm - p.prescreen_margin_cm, cam_h):
                # the same vision frame drives the next search step
                return _search_step(_go(cs, Phase.STEP_SEARCH), frame)
        return (("led", True), _move(q, w.contact_z_cm(q))), _go(cs, Phase.TACTILE_VERIFY)

    if ph is Phase.TACTILE_VERIFY:
        if _verified(frame, p):
            return (), _go(cs, Phase.ATTACH, attach_stage=0)
        return (), _go(cs, Phase.ASCEND)

    if ph is Phase.ATTACH:
        if cs.attach_stage == 0:
            return (("valve", True),), replace(cs, attach_stage=1)
        if dstate.attached and _verified(frame, p):
            q = cs.position
            sign = 1.0 if q[0] <= w.scene.width_cm / 2 else -1.0
            lo, hi = w.cup.rim_outer_cm, w.scene.width_cm - w.cup.rim_outer_cm
            place = (min(max(q[0] + sign * p.transport_cm, lo), hi), q[1])
            lift_z = w.contact_z_cm(q) + p.lift_cm
            return (_move(q, lift_z),), _go(cs, Phase.LIFT, place=place, attach_stage=0)
        attempts = cs.attach_attempts + 1
        if p.max_attach_attempts is not None and attempts >= p.max_attach_attempts:
            return (("valve", False),), _fail(cs, FailureReason.ATTACH_FAILED)
        return (("valve", False),), _go(cs, Phase.ASCEND, attach_stage=0, attach_attempts=attempts)

    if ph is Phase.ASCEND:
        q = cs.position
        return (("led", False), _move(q, w.search_z_cm(q))), _go(cs, Phase.STEP_SEARCH)

    if ph is Phase.STEP_SEARCH:
        return _search_step(cs, frame)

    if ph is Phase.BOUNDARY_ADJUST:
        # reverse the sweep and advance one row; jump when the row is used up
        flip = "-x" if cs.serpentine_dir == "+x" else "+x"
        row_dir = cs.row_dir
        q = w.neighbour(cs.position, row_dir, cs.step_cm)
        if q is None:
            row_dir = "-y" if row_dir == "+y" else "+y"
        if q is None or q in cs.visited:
            q = _nearest_unvisited(cs)
        if q is None or cs.budget <= 0:
            return (), _fail(cs, FailureReason.SEARCH_EXHAUSTED)
        cs = replace(cs, serpentine_dir=flip, row_dir=row_dir)
        return _enter_position(cs, q)

    if ph in (Phase.LIFT, Phase.TRANSPORT, Phase.PLACE):
        if not dstate.attached:
            return (), _fail(cs, FailureReason.DROP_DURING_TRANSPORT)
        if ph is Phase.LIFT:
            return (_move(cs.place, dstate.z_cm),), _go(cs, Phase.TRANSPORT)
        if ph is Phase.TRANSPORT:
            return (_move(cs.place, w.contact_z_cm(cs.place)),), _go(cs, Phase.PLACE)
        return (("valve", False),), _go(cs, Phase.DONE)

    raise ControllerError(f"unhandled phase {ph}")


# --- episode runner -----------------------------------------------------------

@dataclass
class EpisodeResult:
    success: bool
    steps_taken: int
    failure_reason: FailureReason
    trajectory: list = field(default_factory=list)  # (DeviceState, phase)
    records: list = field(default_factory=list)     # JSON-ready per-step rows
    controller_steps: int = 0
    runtime_s: float = 0.0
    note: str = ""

    def __post_init__(self):
        if self.success and self.failure_reason is not FailureReason.NONE:
            raise ValueError("a successful episode carries no failure reason")


def _record(k: int, dstate: DeviceState, phase: Phase, commands) -> dict:
    # logical time keeps recorded files reproducible
    return {"t": round(k * CONTROL_DT_S, 6), "s": [float(v) for v in dstate.vector()],
            "phase": phase.value, "action": [list(c) for c in commands]}


def run_episode(endpoint, scene: Scene, cup_config_id: str | CupFootprint = "I",
                params: ControllerParams | None = None, intrinsics: CameraIntrinsics | None = None,
                client: DeviceClient | None = None) -> EpisodeResult:
    """Drive the controller against the device behind ``endpoint`` until Done or Fail."""
    params = params or ControllerParams()
    intr = intrinsics or CameraIntrinsics()
    cs = initial_state(scene, cup_config_id, params, intr.camera_height_cm)
    t0 = time.monotonic()
    trajectory, records = [], []
    n = 0
    own = client is None
    try:
        if own:
            client = DeviceClient(endpoint)
        client.set_camera(1.0, params.camera_fps, params.camera_downscale)
        client.set_led(False)
        frame = client.next_frame()
        dstate = client.latest_state()
        while not cs.terminal:
            if time.monotonic() - t0 > params.timeout_s:
                cs = replace(cs, phase=Phase.FAIL, failure_reason=FailureReason.TIMEOUT, note="wall-clock limit")
                break
            phase = cs.phase
            commands, cs = controller_step(cs, frame, dstate)
            n += 1
            trajectory.append((dstate, phase))
            records.append(_record(n - 1, dstate, phase, commands))
            if commands:
                for c in commands:
                    client.send(c)
                dstate = client.latest_state()
                if not cs.terminal:
                    frame = client.next_frame()
        trajectory.append((dstate, cs.phase))
        records.append(_record(n, dstate, cs.phase, ()))
    except (SessionError, TimeoutError, OSError) as e:
        cs = replace(cs, phase=Phase.FAIL, failure_reason=FailureReason.TIMEOUT, note=f"link lost: {e}")
    except CommandError as e:
        cs = replace(cs, phase=Phase.FAIL, failure_reason=FailureReason.TIMEOUT, note=f"command rejected: {e}")
    finally:
        if own and client is not None:
            client.close()
    ok = cs.phase is Phase.DONE
    return EpisodeResult(success=ok, steps_taken=cs.steps_taken,
                         failure_reason=FailureReason.NONE if ok else cs.failure_reason,
                         trajectory=trajectory, records=records, controller_steps=n,
                         runtime_s=time.monotonic() - t0, note=cs.note)


def run_local_episode(scene: Scene, config_id: str = "I", params: ControllerParams | None = None,
                      **server_kw) -> EpisodeResult:
    """Serve ``scene`` on an ephemeral loopback port and run one episode against it."""
    from .emulator import EmulatorServer
    with EmulatorServer(scene, config_id, max_sessions=1, **server_kw) as srv:
        return run_episode(srv.endpoint, scene, config_id, params)


def write_trajectory(path, result: EpisodeResult, scene: Scene | None = None, extra: dict | None = None):
    """JSON-lines: an optional header line, then one (t, s, phase, action) row per step."""
    with open(path, "w") as fh:
        if scene is not None or extra:
            head = {"kind": "header", "success": result.success,
                    "failure_reason": result.failure_reason.value}
            if scene is not None:
                head["scene"] = scene.to_dict()
            head.update(extra or {})
            fh.write(json.dumps(head, separators=(",", ":")) + "\n")
        for row in result.records:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
