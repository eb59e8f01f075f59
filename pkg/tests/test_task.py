import json

import numpy as np
import pytest

from flexicup.policy.task import (ACTIONS_PER_CHUNK, INCLINE_RANGE_DEG, MAX_EPISODE_STEPS, CollectionError, Episode,
                                  ReplayError, TaskEnv, build_dataset, collect_demos, expert_action, load_demos,
                                  read_demo, replay, run_expert, write_demo)


def tilt_before_attach(demo):
    """Index of the first tilt action is below the first valve-open action."""
    a = demo.actions
    tilt = np.nonzero(np.abs(a[:, 3]) > 0)[0]
    valve = np.nonzero(a[:, 5] > 0.5)[0]
    return len(tilt) > 0 and len(valve) > 0 and tilt[0] < valve[0]


@pytest.fixture(scope="module")
def fifty(tmp_path_factory):
    out = tmp_path_factory.mktemp("demos")
    return out, collect_demos(50, seed=0, out_dir=out)


def test_flat_single_demo_ends_done(tmp_path):
    demos = collect_demos(1, seed=3, out_dir=tmp_path, family="flat")
    rows = [json.loads(line) for line in (tmp_path / "demo_000.jsonl").read_text().splitlines()]
    assert rows[0]["kind"] == "header" and rows[0]["success"] is True
    assert rows[-1]["phase"] == "Done" and rows[-1]["action"] == []
    assert demos[0].episode.scene.incline_deg == 0.0
    # a level board needs no tilt
    assert not np.any(demos[0].actions[:, 3])


def test_fifty_inclined_demos_tilt_before_attach(fifty):
    out, demos = fifty
    files = sorted(out.glob("*.jsonl"))
    assert len(files) == 50
    for d in load_demos(out):
        lo, hi = INCLINE_RANGE_DEG
        assert lo <= d.episode.scene.incline_deg <= hi
        assert d.success and d.phases[-1] == "Done"
        assert tilt_before_attach(d)


def test_seeded_rerun_is_byte_identical(fifty, tmp_path):
    out, _ = fifty
    collect_demos(50, seed=0, out_dir=tmp_path)
    for f in sorted(out.glob("*.jsonl")):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_replay_regenerates_states(fifty, tmp_path):
    out, demos = fifty
    d = read_demo(out / "demo_007.jsonl")
    assert np.array_equal(d.actions, demos[7].actions)
    obs = replay(d)
    assert len(obs) == len(d.actions) + 1
    np.testing.assert_allclose(obs[-1].state_vec, d.states[-1], atol=1e-9)
    d.states[3, 0] += 0.5
    with pytest.raises(ReplayError):
        replay(d)
    bad = tmp_path / "x.jsonl"
    bad.write_text(json.dumps({"kind": "header", "task": "other"}) + "\n")
    with pytest.raises(ReplayError):
        read_demo(bad)
    with pytest.raises(FileNotFoundError):
        load_demos(tmp_path / "empty")


def test_collection_error_when_expert_cannot_succeed(monkeypatch):
    import flexicup.policy.task as task
    monkeypatch.setattr(task, "expert_action", lambda frame, state: (np.zeros(6), "Descend"))
    with pytest.raises(CollectionError):
        collect_demos(2, seed=0)


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        Episode.sample(0, family="staircase")


def test_env_rejects_bad_actions_and_clamps():
    env = TaskEnv(Episode.sample(1))
    with pytest.raises(ValueError):
        env.step(np.zeros(5))
    with pytest.raises(ValueError):
        env.step(np.array([np.nan, 0, 0, 0, 0, 0]))
    x0 = env.state.x_cm
    env.step(np.array([5.0, 0, 0, 0, 1, 0]))
    assert env.state.x_cm == pytest.approx(x0 + 1.0)
    assert env.state.led_on


def test_episode_budget_and_untouched_success():
    ep = Episode.sample(2)
    env = TaskEnv(ep)
    while not env.done:
        env.step(np.zeros(6))
    assert env.steps == MAX_EPISODE_STEPS and not env.success


def test_expert_stays_in_vision_until_led_on():
    env = TaskEnv(Episode.sample(4))
    a, phase = expert_action(env.frame, env.state)
    assert phase == "Descend" and a[4] == 1.0 and a[2] < 0


def test_dataset_shapes():
    demos = collect_demos(3, seed=0)
    ds = build_dataset(demos, history=2, horizon=8)
    n = sum(len(d.actions) for d in demos)
    assert len(ds) == n and ds.chunks.shape == (n, 8, 6)
    assert ds.workspace.shape == (n, 64, 64) and ds.state.shape == (n, 8)
    # the first sample of each demo repeats its first observation
    assert ds.history_idx[0].tolist() == [0, 0]
    obs, chunks = ds.batch(np.array([0, 1]))
    assert obs["central"].shape == (2, 2, 64, 64) and chunks.shape == (2, 8, 6)
    assert 1 <= ACTIONS_PER_CHUNK <= 8


def test_write_read_roundtrip(tmp_path):
    d = run_expert(Episode.sample(11))
    write_demo(tmp_path / "d.jsonl", d)
    back = read_demo(tmp_path / "d.jsonl")
    assert np.array_equal(back.actions, d.actions) and np.array_equal(back.states, d.states)
    assert back.phases == d.phases and back.success == d.success


def test_noisy_collection_keeps_clean_labels(tmp_path):
    d = run_expert(Episode.sample(5), action_noise=0.25)
    assert not np.array_equal(d.executed, d.actions)
    # labels stay on the expert's discrete grid; the perturbation only lives in ``executed``
    assert set(np.unique(d.actions[:, :4])) <= {-1.0, 0.0, 1.0}
    write_demo(tmp_path / "n.jsonl", d)
    back = read_demo(tmp_path / "n.jsonl")
    assert np.array_equal(back.executed, d.executed)
    np.testing.assert_allclose(replay(back)[-1].state_vec, d.states[-1], atol=1e-9)
    clean = run_expert(Episode.sample(5))
    assert np.array_equal(clean.executed, clean.actions)
