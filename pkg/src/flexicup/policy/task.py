"""Inclined-transport task: scenes, observations, scripted expert, demos, training, rollouts.

A 0.5 kg object lies on a 5-15 degree incline whose base elevation is unknown.
The cup starts a whole number of centimetres above it, level. Success means
it is attached, lifted at least 1.5 cm and carried 4.9 cm along +x. The seal
only forms when the cup tilt is within about two degrees of the incline, and
only touch reveals which way to tilt.
"""
from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from ..controller import Phase
from ..device import DeviceSimulator
from ..perception import segment_contact
from ..physics import SuctionConfig
from ..scene import Pose, Scene, surface_height
from ..sensor import MARKER_RADIUS_CM, Frame, Modality
from .diffusion import Adam, NoiseSchedule, sample_chunk, train_step
from .model import ACTION_DIM, DiffusionPolicy, ObservationBundle, PolicyConfig

TASK_NAME = "inclined-transport"
SCENE_FAMILIES = ("inclined", "flat")
INCLINE_RANGE_DEG = (5.0, 15.0)
BASE_RANGE_MM = (0.0, 40.0)
START_HEIGHTS_CM = (1, 2, 3)
TARGET = (10.0, 10.0)
OBJECT_MASS_KG = 0.5
SEAL_GAP_MM = 0.5
CAMERA_DOWNSCALE = 4
LIFT_CM = 1.5
TRANSPORT_CM = 4.9
MAX_EPISODE_STEPS = 40
CONTACT_COVERAGE = 0.5
ALIGNED_COVERAGE = 0.98
OBS_SIZE = 64
ACTIONS_PER_CHUNK = 2
# std of the Gaussian perturbation added to executed pose deltas while collecting,
# so the demonstrations also cover states slightly off the expert's own path
DEMO_ACTION_NOISE = 0.25

WS_BOARD, WS_MARKER, WS_CUP = 0.8, 0.5, 0.2


class CollectionError(RuntimeError):
    pass


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    """Initial conditions of one task episode."""
    scene: Scene
    start_height_cm: int
    config_id: str = "I"

    @classmethod
    def sample(cls, seed: int, config_id: str = "I", family: str = "inclined") -> "Episode":
        """Seeded episode; the "flat" family is a level board at a random elevation."""
        if family not in SCENE_FAMILIES:
            raise ValueError(f"unknown scene family {family!r}; choose from {SCENE_FAMILIES}")
        rng = np.random.default_rng([seed, 7])
        incline = float(rng.uniform(*INCLINE_RANGE_DEG))
        base = float(rng.uniform(*BASE_RANGE_MM))
        if family == "flat":
            incline = 0.0
        scene = Scene(width_cm=20.0, height_cm=20.0, heights=np.zeros((20, 20)), incline_deg=incline,
                      target=TARGET, object_mass_kg=OBJECT_MASS_KG, seed=seed, base_mm=base)
        return cls(scene, int(rng.choice(START_HEIGHTS_CM)), config_id)

    @property
    def contact_z_cm(self) -> float:
        return surface_height(self.scene, *TARGET) / 10.0

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "start_height_cm": self.start_height_cm,
                "config_id": self.config_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(Scene.from_dict(d["scene"]), int(d["start_height_cm"]), d.get("config_id", "I"))


# -- observations --------------------------------------------------------------

def workspace_image(scene: Scene, x_cm: float, y_cm: float, rim_radius_cm: float, size: int = OBS_SIZE):
    """Top-down orthographic view: board, target marker, cup footprint."""
    c = (np.arange(size) + 0.5)
    gx = c[None, :] * scene.width_cm / size
    gy = c[:, None] * scene.height_cm / size
    img = np.full((size, size), WS_BOARD)
    tx, ty = scene.target
    img[(gx - tx) ** 2 + (gy - ty) ** 2 <= MARKER_RADIUS_CM ** 2] = WS_MARKER
    img[(gx - x_cm) ** 2 + (gy - y_cm) ** 2 <= rim_radius_cm ** 2] = WS_CUP
    return img


def central_image(frame: Frame, size: int = OBS_SIZE) -> np.ndarray:
    """Central-disk crop resampled to ``size`` x ``size``, scaled to [0, 1]."""
    crop = frame.central_crop().astype(np.float64)
    n = crop.shape[0]
    g = (np.arange(size) + 0.5) * n / size - 0.5
    yy, xx = np.meshgrid(g, g, indexing="ij")
    return np.clip(map_coordinates(crop, [yy, xx], order=1, mode="nearest") / 255.0, 0.0, 1.0)


def peripheral_image(frame: Frame, size: int = OBS_SIZE) -> np.ndarray:
    """Polar unwrap of the annulus: rows run outward in radius, columns in azimuth."""
    cx, cy = frame.center_px
    r = np.linspace(frame.central_radius_px + 0.5, frame.peripheral_outer_px - 0.5, size)
    a = np.linspace(0.0, 2 * math.pi, size, endpoint=False)
    rr, aa = np.meshgrid(r, a, indexing="ij")
    coords = [cy + rr * np.sin(aa), cx + rr * np.cos(aa)]
    img = map_coordinates(frame.pixels.astype(np.float64), coords, order=1, mode="nearest")
    return np.clip(img / 255.0, 0.0, 1.0)


class TaskEnv:
    """Steps the device model with 6-d actions and renders observation bundles."""

    def __init__(self, episode: Episode):
        self.episode = episode
        scene = episode.scene
        self.suction = SuctionConfig.for_config(episode.config_id, seal_gap_tolerance_mm=SEAL_GAP_MM)
        z0 = episode.contact_z_cm + episode.start_height_cm
        self.sim = DeviceSimulator(scene, episode.config_id, suction=self.suction,
                                   start_pose=Pose(*TARGET, z0, 0.0), downscale=CAMERA_DOWNSCALE)
        self.x0 = TARGET[0]
        self.steps = 0
        self.frame = self.sim.render()

    @property
    def state(self):
        return self.sim.state

    @property
    def success(self) -> bool:
        st = self.sim.state
        return bool(st.attached and st.z_cm >= self.episode.contact_z_cm + LIFT_CM - 1e-9
                and st.x_cm >= self.x0 + TRANSPORT_CM - 1e-9)

    @property
    def done(self) -> bool:
        return self.success or self.steps >= MAX_EPISODE_STEPS

    def observe(self) -> ObservationBundle:
        st = self.sim.state
        rim = self.suction.cup.rim_outer_cm
        return ObservationBundle(workspace_img=workspace_image(self.episode.scene, st.x_cm, st.y_cm, rim),
                                 central_img=central_image(self.frame),
                                 peripheral_img=peripheral_image(self.frame),
                                 state_vec=st.vector())

    def step(self, action) -> None:
        """LED first, then valve, then the clamped pose delta."""
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (ACTION_DIM,) or not np.all(np.isfinite(a)):
            raise ValueError(f"action must be {ACTION_DIM} finite values")
        sim = self.sim
        led, valve = bool(a[4] > 0.5), bool(a[5] > 0.5)
        if led != sim.state.led_on:
            sim.set_led(led)
        if valve != sim.state.valve_open:
            sim.set_valve(valve)
        d = np.clip(a[:4], -1.0, 1.0)
        st = sim.state
        sc = self.episode.scene
        x = min(max(st.x_cm + d[0], 0.0), sc.width_cm)
        y = min(max(st.y_cm + d[1], 0.0), sc.height_cm)
        sim.move(x, y, st.z_cm + d[2], st.tilt_deg + d[3])
        self.steps += 1
        self.frame = sim.render()


# -- scripted expert -----------------------------------------------------------

def expert_action(frame: Frame, state) -> tuple[np.ndarray, str]:
    """Tactile-feedback demonstrator: descend, level against the contact, attach, carry.

    Returns the action and a phase label for the record file.
    """
    if state.attached:
        return np.array([1.0, 0.0, 1.0, 0.0, 1.0, 1.0]), Phase.TRANSPORT.value
    descend = np.array([0.0, 0.0, -1.0, 0.0, 1.0, 0.0])
    if frame.modality != Modality.TACTILE:
        return descend, Phase.DESCEND.value
    seg = segment_contact(frame)
    if seg.coverage < CONTACT_COVERAGE:
        return descend, Phase.DESCEND.value
    if seg.coverage < ALIGNED_COVERAGE:
        cols = np.nonzero(seg.mask)[1]
        offset = cols.mean() - (seg.mask.shape[1] - 1) / 2.0
        # the rim touches first on the high side; tilt toward it
        return np.array([0.0, 0.0, 0.0, 1.0 if offset > 0 else -1.0, 1.0, 0.0]), Phase.TACTILE_VERIFY.value
    return np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0]), Phase.ATTACH.value


@dataclass
class Demo:
    """``actions`` are the expert's labels; ``executed`` is what was actually applied
    (the same array unless collection injected noise)."""
    episode: Episode
    states: np.ndarray      # (n + 1, 8)
    actions: np.ndarray     # (n, 6)
    phases: list = field(default_factory=list)
    success: bool = False
    executed: np.ndarray | None = None

    def __post_init__(self):
        if self.executed is None:
            self.executed = self.actions


def run_expert(episode: Episode, action_noise: float = 0.0) -> Demo:
    """Roll out the expert; with ``action_noise`` > 0 the executed pose deltas are
    perturbed (seeded by the episode) while the clean labels are recorded."""
    env = TaskEnv(episode)
    rng = np.random.default_rng([episode.scene.seed or 0, 11])
    states, actions, executed, phases = [env.state.vector()], [], [], []
    while not env.done:
        a, phase = expert_action(env.frame, env.state)
        e = a.copy()
        if action_noise > 0:
            e[:4] = np.clip(e[:4] + rng.normal(0.0, action_noise, 4), -1.0, 1.0)
        env.step(e)
        actions.append(a)
        executed.append(e)
        phases.append(phase)
        states.append(env.state.vector())
    phases.append(Phase.DONE.value if env.success else Phase.FAIL.value)
    return Demo(episode, np.array(states), np.array(actions).reshape(-1, ACTION_DIM), phases, bool(env.success),
                np.array(executed).reshape(-1, ACTION_DIM))


def write_demo(path, demo: Demo, dt_s: float = 0.1):
    """JSON-lines trajectory: a header line, one (t, s, phase, action) row per step,
    and a closing row with the final state, the end phase and no action. Rows
    whose executed action differs from the label also carry ``executed``."""
    with open(path, "w") as fh:
        head = {"kind": "header", "task": TASK_NAME, "success": bool(demo.success), **demo.episode.to_dict()}
        fh.write(json.dumps(head, separators=(",", ":")) + "\n")
        n = len(demo.actions)
        for k in range(n + 1):
            row = {"t": round(k * dt_s, 6), "s": [float(v) for v in demo.states[k]],
                   "phase": demo.phases[k] if k < len(demo.phases) else "",
                   "action": [float(v) for v in demo.actions[k]] if k < n else []}
            if k < n and not np.array_equal(demo.executed[k], demo.actions[k]):
                row["executed"] = [float(v) for v in demo.executed[k]]
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_demo(path) -> Demo:
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or lines[0].get("kind") != "header" or lines[0].get("task") != TASK_NAME:
        raise ReplayError(f"{path}: not an {TASK_NAME} demonstration")
    head, rows = lines[0], lines[1:]
    acted = [r for r in rows if r["action"]]
    actions = np.array([r["action"] for r in acted], dtype=np.float64).reshape(-1, ACTION_DIM)
    executed = np.array([r.get("executed", r["action"]) for r in acted], dtype=np.float64).reshape(-1, ACTION_DIM)
    states = np.array([r["s"] for r in rows], dtype=np.float64).reshape(-1, 8)
    return Demo(Episode.from_dict(head), states, actions, [r.get("phase", "") for r in rows],
                bool(head.get("success", False)), executed)


def replay(demo: Demo, check_states: bool = True) -> list[ObservationBundle]:
    """Re-execute the executed actions to regenerate the observation at every step.

    Returns n + 1 observations for n actions. Recorded states are checked
    against the replay so a stale or edited file is caught.
    """
    env = TaskEnv(demo.episode)
    obs = [env.observe()]
    for k, a in enumerate(demo.executed):
        if check_states and k < len(demo.states) and not np.allclose(env.state.vector(), demo.states[k], atol=1e-6):
            raise ReplayError(f"replay diverged from the recorded state at step {k}")
        env.step(a)
        obs.append(env.observe())
    return obs


def collect_demos(n: int, seed: int = 0, out_dir=None, max_attempts_factor: int = 3,
                  family: str = "inclined", config_id: str = "I",
                  action_noise: float = DEMO_ACTION_NOISE) -> list[Demo]:
    """Run the expert on fresh episodes until ``n`` succeed; write them if ``out_dir`` is given."""
    demos: list[Demo] = []
    attempts = 0
    limit = max_attempts_factor * n
    while len(demos) < n and attempts < limit:
        demo = run_expert(Episode.sample(seed + attempts, config_id, family), action_noise)
        attempts += 1
        if demo.success:
            demos.append(demo)
    if len(demos) < n:
        raise CollectionError(f"only {len(demos)} of {n} demonstrations succeeded in {attempts} attempts")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, d in enumerate(demos):
            write_demo(out / f"demo_{i:03d}.jsonl", d)
    return demos


def load_demos(directory) -> list[Demo]:
    files = sorted(Path(directory).glob("*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no demonstration files in {directory}")
    return [read_demo(f) for f in files]


# -- dataset and training --------------------------------------------------------

@dataclass
class Dataset:
    """Per-step observations plus (history index, chunk) training pairs."""
    workspace: np.ndarray   # (M, S, S) float32
    central: np.ndarray
    peripheral: np.ndarray
    state: np.ndarray       # (M, 8)
    history_idx: np.ndarray  # (N, H_o) rows into the arrays above
    chunks: np.ndarray      # (N, H_p, 6)

    def __len__(self):
        return len(self.chunks)

    def batch(self, idx):
        h = self.history_idx[idx]
        obs = {"workspace": self.workspace[h].astype(np.float64), "central": self.central[h].astype(np.float64),
               "peripheral": self.peripheral[h].astype(np.float64), "state": self.state[h]}
        return obs, self.chunks[idx]


def build_dataset(demos, history: int, horizon: int) -> Dataset:
    """Every step of every demo becomes one sample; histories repeat the first
    observation and chunks repeat the last action past the episode ends."""
    ws, ce, pe, st, hist, chunks = [], [], [], [], [], []
    base = 0
    for demo in demos:
        obs = replay(demo)[:-1]
        n = len(obs)
        for o in obs:
            ws.append(o.workspace_img)
            ce.append(o.central_img)
            pe.append(o.peripheral_img)
            st.append(o.state_vec)
        acts = demo.actions
        for k in range(n):
            hist.append([base + max(0, k - j) for j in range(history - 1, -1, -1)])
            rows = [min(k + j, n - 1) for j in range(horizon)]
            chunks.append(acts[rows])
        base += n
    f32 = lambda a: np.asarray(a, dtype=np.float32)
    return Dataset(f32(ws), f32(ce), f32(pe), np.asarray(st, dtype=np.float64), np.asarray(hist, dtype=np.int64),
                   np.asarray(chunks, dtype=np.float64))


def train_policy(config: PolicyConfig, dataset: Dataset, steps: int = 3000, batch_size: int = 16,
                 lr: float = 1e-3, clip_norm: float = 5.0, seed: int = 0,
                 schedule: NoiseSchedule | None = None, log=None) -> tuple[DiffusionPolicy, list[float]]:
    """Adam with a cosine learning-rate decay.

    Image standardisation statistics are fitted on the whole dataset first. Momentum SGD (the
    ``train_step`` default) also converges here, with a lower closed-loop success rate.
    """
    schedule = schedule or NoiseSchedule.cosine(config.diffusion_steps)
    policy = DiffusionPolicy(config)
    policy.fit_normalizer({"workspace": dataset.workspace, "central": dataset.central,
                           "peripheral": dataset.peripheral})
    opt = Adam(policy.params, lr, clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    losses = []
    for i in range(steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * i / steps))
        losses.append(train_step(policy, dataset.batch(idx), schedule, lr=step_lr, rng=rng, optimizer=opt))
        if log and (i + 1) % max(1, steps // 10) == 0:
            log(f"step {i + 1}/{steps} loss {np.mean(losses[-50:]):.4f}")
    return policy, losses


# -- evaluation --------------------------------------------------------------------

@dataclass
class RolloutResult:
    success: bool
    steps: int
    incline_deg: float
    final_tilt_deg: float


def rollout(policy: DiffusionPolicy, episode: Episode, schedule: NoiseSchedule | None = None, seed: int = 0,
            actions_per_chunk: int = ACTIONS_PER_CHUNK) -> RolloutResult:
    """Closed-loop execution: sample a chunk, run its first actions, re-observe."""
    schedule = schedule or NoiseSchedule.cosine()
    cfg = policy.config
    env = TaskEnv(episode)
    first = env.observe()
    hist = deque([first] * cfg.history, maxlen=cfg.history)
    k = 0
    while not env.done:
        obs = {"workspace": np.stack([o.workspace_img for o in hist])[None],
               "central": np.stack([o.central_img for o in hist])[None],
               "peripheral": np.stack([o.peripheral_img for o in hist])[None],
               "state": np.stack([o.state_vec for o in hist])[None]}
        chunk = sample_chunk(policy, obs, schedule, seed=seed * 10_000 + k)[0]
        k += 1
        for a in chunk[:actions_per_chunk]:
            env.step(a)
            hist.append(env.observe())
            if env.done:
                break
    return RolloutResult(env.success, env.steps, episode.scene.incline_deg, env.state.tilt_deg)


def evaluate_policy(policy: DiffusionPolicy, episodes: int, seed: int = 10_000,
                    schedule: NoiseSchedule | None = None) -> list[RolloutResult]:
    """Rollouts on held-out episodes (seeds disjoint from demo collection by default)."""
    return [rollout(policy, Episode.sample(seed + i), schedule, seed=seed + i) for i in range(episodes)]


def train_and_evaluate(demos, ablations=("full", "workspace-only"), episodes: int = 30, steps: int = 3000,
                       seed: int = 0, eval_seed: int = 10_000, config: PolicyConfig | None = None,
                       log=None, out_dir=None) -> dict:
    """Train one policy per ablation on the same demos and evaluate each."""
    from .model import with_ablation
    base = config or PolicyConfig(seed=seed)
    out = {}
    cache: dict[tuple, Dataset] = {}
    for abl in ablations:
        cfg = with_ablation(base, abl)
        key = (cfg.history, cfg.horizon)
        if key not in cache:
            cache[key] = build_dataset(demos, *key)
        t0 = time.perf_counter()
        policy, losses = train_policy(cfg, cache[key], steps=steps, seed=seed, log=log)
        t_train = time.perf_counter() - t0
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            policy.save(Path(out_dir) / f"policy_{abl}.f8")
        t0 = time.perf_counter()
        results = evaluate_policy(policy, episodes, seed=eval_seed)
        succ = sum(r.success for r in results)
        out[abl] = {"successes": succ, "episodes": episodes, "success_rate": succ / episodes if episodes else 0.0,
                    "final_loss": float(np.mean(losses[-50:])) if losses else None,
                    "train_s": t_train, "eval_s": time.perf_counter() - t0}
        if log:
            log(f"{abl}: {succ}/{episodes} success")
    return out
