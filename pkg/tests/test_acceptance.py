"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
"""
import math
import random
import socket
import time

import numpy as np
import pytest

from flexicup import protocol as P
from flexicup.bench import bench_classification, bench_grasping
from flexicup.client import DeviceClient
from flexicup.controller import ControllerParams, run_local_episode
from flexicup.emulator import EmulatorServer, parse_endpoint
from flexicup.physics import ContactResult, SuctionConfig, attach_update, holding_force
from flexicup.policy import DiffusionPolicy, NoiseSchedule, PolicyConfig, SGDMomentum, grad_check, sample_chunk
from flexicup.policy import forward_diffuse, train_step
from flexicup.policy.diffusion import to_model_space
from flexicup.policy.model import ABLATIONS, STATE_OFFSET
from flexicup.policy.task import collect_demos, train_and_evaluate
from flexicup.scene import flat_scene, window_board
from flexicup.sensor import Modality, tactile_density
from flexicup.state import DeviceState

pytestmark = pytest.mark.acceptance


def full_seal():
    z = np.zeros((3, 3))
    return ContactResult(z > 0, z, 1.0, 1.0, 0.0, 1.0, flat_support=True)


def test_criterion_01_protocol(criterion):
    t0 = time.perf_counter()
    rnd = random.Random(0)
    types = list(P.MsgType)
    ok = 0
    raws = []
    for _ in range(10_000):
        mtype, seq = rnd.choice(types), rnd.getrandbits(32)
        payload = rnd.randbytes(rnd.randint(0, 256))
        raw = P.encode_message(mtype, seq, payload)
        msg, rest = P.decode_message(raw)
        ok += (msg.msg_type, msg.seq, msg.payload, rest) == (mtype, seq, payload, b"")
        if len(raws) < 100:
            raws.append(raw)
    flips = detected = 0
    for raw in raws:
        for bit in range(len(raw) * 8):
            bad = bytearray(raw)
            bad[bit // 8] ^= 1 << (bit % 8)
            flips += 1
            try:
                P.decode_message(bytes(bad))
            except P.ProtocolError:
                detected += 1
    dt = time.perf_counter() - t0
    criterion(1, ok == 10_000 and detected == flips and dt < 10.0,
              f"round-trip {ok}/10000, single-bit flips detected {detected}/{flips}, {dt:.2f} s")


def test_criterion_02_streaming(criterion):
    with EmulatorServer(flat_scene(), "I") as srv:
        host, port = parse_endpoint(srv.endpoint)
        dec = P.StreamDecoder()
        frames = []
        with socket.create_connection((host, port), timeout=2) as s:
            t_first = None
            while t_first is None or time.monotonic() - t_first < 10.0:
                for m in dec.feed(s.recv(1 << 20)):
                    if m.msg_type == P.MsgType.FRAME:
                        now = time.monotonic()
                        if t_first is None:
                            t_first = now
                        if now - t_first < 10.0:
                            frames.append(m)
    f = P.unpack_frame(frames[-1].payload)
    seqs = [m.seq for m in frames]
    monotone = all(b > a for a, b in zip(seqs, seqs[1:]))
    fps = len(frames) / 10.0
    criterion(2, fps >= 30.0 and monotone and (f.width_px, f.height_px) == (1024, 768),
              f"{len(frames)} frames of {f.width_px}x{f.height_px} in 10 s = {fps:.1f} fps, seq monotone {monotone}")


def test_criterion_03_led_toggle(criterion):
    good = 0
    with EmulatorServer(flat_scene(), "I") as srv, DeviceClient(srv.endpoint) as c:
        c.set_camera(1.0, 60.0, 1)
        prev = c.next_frame()
        for i in range(100):
            on = prev.modality is not Modality.TACTILE
            c.set_led(on)
            f = c.next_frame()
            outside = ~f.lens_mask()
            central = f.central_mask()
            good += (f.modality is (Modality.TACTILE if on else Modality.VISION)
                     and not f.pixels[outside].any()
                     and not np.array_equal(f.pixels[central], prev.pixels[central]))
            prev = f
    criterion(3, good == 100, f"{good}/100 toggles switched modality on the next frame with lens-only changes")


def test_criterion_04_force_anchor(criterion):
    cfg = SuctionConfig.for_config("I")
    f = holding_force(full_seal(), cfg, True)
    st = DeviceState(valve_open=True)
    light = attach_update(flat_scene(object_mass_kg=1.0), st, full_seal(), cfg).attached
    heavy = attach_update(flat_scene(object_mass_kg=4.0), st, full_seal(), cfg).attached
    criterion(4, f == 34.3 and light and not heavy, f"F = {f} N, 1 kg attaches {light}, 4 kg attaches {heavy}")


def test_criterion_05_tactile_density(criterion):
    d = tactile_density()
    rel = abs(d - 60_248) / 60_248
    criterion(5, rel <= 0.05, f"central-disk density {d:.0f} px/cm^2 ({100 * rel:.2f}% from 60,248)")


@pytest.mark.slow
def test_criterion_06_oracle_agreement(criterion):
    t0 = time.perf_counter()
    rep = bench_grasping(("vacuum", "bernoulli"), (0.25, 0.5, 0.75), trials_per_cell=30, seed=0)
    dt = time.perf_counter() - t0
    per_mode = {}
    for mode in ("vacuum", "bernoulli"):
        rows = [r for c in rep.conditions if c.params["mode"] == mode for r in c.trial_rows]
        per_mode[mode] = sum(r["success"] == r["oracle_feasible"] for r in rows) / len(rows)
    criterion(6, min(per_mode.values()) >= 0.95 and dt < 300,
              "oracle agreement " + ", ".join(f"{m} {a:.3f}" for m, a in per_mode.items())
              + f" over 90 boards each; 180 episodes in {dt:.0f} s")


def test_criterion_07_extremes(criterion):
    rep = bench_grasping(("vacuum", "bernoulli"), (0.0, 1.0), trials_per_cell=10, seed=7)
    rates = {c.name: c.success_rate for c in rep.conditions}
    reasons = {r["failure_reason"] for c in rep.conditions if c.params["coverage"] == 1.0 for r in c.trial_rows}
    ok = all(rates[f"{m}@0"] == 1.0 and rates[f"{m}@1"] == 0.0 for m in ("vacuum", "bernoulli"))
    criterion(7, ok and reasons == {"SearchExhausted"}, f"success rates {rates}, coverage-1 failures {sorted(reasons)}")


@pytest.mark.slow
def test_criterion_08_step_size(criterion):
    boards = [window_board(seed=i) for i in range(30)]
    means = {}
    for step in (1.0, 0.5):
        params = ControllerParams(step_cm=step)
        means[step] = float(np.mean([run_local_episode(b, "I", params).steps_taken for b in boards]))
    ratio = means[0.5] / means[1.0]
    criterion(8, ratio >= 3.0, f"mean search steps {means[1.0]:.1f} at 1 cm, {means[0.5]:.1f} at 0.5 cm "
                               f"(x{ratio:.2f})")


def test_criterion_09_fusion(criterion):
    r = bench_classification(seed=0)
    acc = r.accuracy
    ok = (acc["fused"] >= acc["vision"] and acc["fused"] >= acc["tactile"]
          and bool(r.misclassified["vision"]) and bool(r.misclassified["tactile"]))
    criterion(9, ok, f"accuracy fused {acc['fused']:.3f}, vision {acc['vision']:.3f}, tactile {acc['tactile']:.3f}; "
                     f"misclassified by vision {r.misclassified['vision']}, by tactile {r.misclassified['tactile']}")


def micro_batch(cfg, b=2):
    rng = np.random.default_rng(0)
    h, s = cfg.history, cfg.img
    obs = {k: rng.uniform(size=(b, h, s, s)) for k in ("workspace", "central", "peripheral")}
    obs["state"] = np.array(STATE_OFFSET) + rng.normal(size=(b, h, 8))
    chunk = rng.uniform(-1, 1, size=(b, cfg.horizon, 6))
    chunk[..., 4:] = rng.integers(0, 2, size=(b, cfg.horizon, 2))
    return obs, to_model_space(chunk)


def test_criterion_10_grad_check(criterion):
    t0 = time.perf_counter()
    worst = {}
    for abl in ABLATIONS:
        cfg = PolicyConfig.micro(seed=1, ablation=abl)
        worst[abl] = grad_check(DiffusionPolicy(cfg), micro_batch(cfg)).max_rel_error
    dt = time.perf_counter() - t0
    criterion(10, max(worst.values()) <= 1e-4 and dt < 60,
              "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {dt:.1f} s")


def test_criterion_11_diffusion_sanity(criterion):
    sched = NoiseSchedule.cosine(50)
    cfg = PolicyConfig(seed=0, d=8, heads=2, img=16, channels=(4, 4), hidden=256, t_embed=32, horizon=4)
    pol = DiffusionPolicy(cfg)
    obs, x0 = micro_batch(cfg, 1)
    chunk = x0.copy()
    chunk[..., 4:] = (chunk[..., 4:] + 1) / 2
    rng = np.random.default_rng(99)
    ts = rng.integers(1, 50, size=64)
    noises = rng.standard_normal((64,) + x0.shape)

    def fixed_loss():
        return float(np.mean([pol.loss_and_grads(obs, x0, ts[i:i + 1], noises[i], sched)[0] for i in range(64)]))

    initial = fixed_loss()
    batch = ({k: np.repeat(v, 16, axis=0) for k, v in obs.items()}, np.repeat(chunk, 16, axis=0))
    opt = SGDMomentum(pol.params, 3e-2, clip_norm=5.0)
    trng = np.random.default_rng(0)
    for i in range(200):
        train_step(pol, batch, sched, lr=3e-2 * 0.5 * (1 + math.cos(math.pi * i / 200)), rng=trng, optimizer=opt)
    ratio = fixed_loss() / initial
    same = np.array_equal(sample_chunk(pol, obs, sched, seed=4), sample_chunk(pol, obs, sched, seed=4))
    errs = []
    for t in (5, 15, 25, 35, 49):
        xt = forward_diffuse(np.full(10_000, 0.3), t, np.random.default_rng(t).standard_normal(10_000), sched)
        errs.append(abs(xt.var() / (1 - sched.alphas_bar[t]) - 1))
    criterion(11, ratio < 0.1 and same and max(errs) <= 0.05,
              f"overfit loss ratio {ratio:.3f} after 200 steps, seeded sampling identical {same}, "
              f"forward variance max rel error {max(errs):.3f}")


@pytest.mark.slow
def test_criterion_12_end_to_end_policy(criterion, tmp_path):
    t0 = time.perf_counter()
    demos = collect_demos(50, seed=0, out_dir=tmp_path / "demos")
    res = train_and_evaluate(demos, ("full", "workspace-only"), episodes=30, seed=0, out_dir=tmp_path / "policies")
    dt = time.perf_counter() - t0
    full, ws = res["full"]["success_rate"], res["workspace-only"]["success_rate"]
    criterion(12, full >= 0.6 and ws < full and dt < 45 * 60,
              f"full {res['full']['successes']}/30, workspace-only {res['workspace-only']['successes']}/30 "
              f"after 50 demos; {dt / 60:.1f} min")
