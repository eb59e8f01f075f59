import csv
import json

import pytest

from flexicup import bench
from flexicup.bench import (SCHEMA, SCHEMA_VERSION, BenchReport, Condition, ConfigurationError, EmulatorSpawnError,
                            bench_grasping, bench_policy_ablation, board_seed, demo_collect)
from flexicup.cli import build_parser, main
from flexicup.policy import DiffusionPolicy, PolicyConfig


@pytest.fixture(scope="module")
def extremes():
    return bench_grasping(("vacuum", "bernoulli"), (0.0, 1.0), trials_per_cell=2, seed=3)


def test_extreme_coverages(extremes):
    rates = {c.name: c.success_rate for c in extremes.conditions}
    assert rates == {"vacuum@0": 1.0, "vacuum@1": 0.0, "bernoulli@0": 1.0, "bernoulli@1": 0.0}
    for c in extremes.conditions:
        if c.params["coverage"] == 1.0:
            assert {r["failure_reason"] for r in c.trial_rows} == {"SearchExhausted"}
    assert extremes.oracle_agreement == 1.0


def test_report_schema_and_determinism(extremes, tmp_path):
    d = json.loads(extremes.to_json())
    assert d["schema"] == SCHEMA and d["version"] == SCHEMA_VERSION
    assert "runtime_s" not in d and "runtime_s" in extremes.to_dict(include_timing=True)
    for c in d["conditions"]:
        assert c["success_rate"] == c["successes"] / c["trials"]
    again = bench_grasping(("vacuum", "bernoulli"), (0.0, 1.0), trials_per_cell=2, seed=3)
    assert again.to_json() == extremes.to_json() and again.to_csv() == extremes.to_csv()
    path = extremes.write(tmp_path / "r" / "grasp.json")
    assert json.loads(path.read_text()) == d
    lines = path.with_suffix(".csv").read_text().splitlines()
    assert lines[0] == f"# {SCHEMA} v{SCHEMA_VERSION} kind=grasp seed=3"
    rows = list(csv.DictReader(lines[1:]))
    assert [r["condition"] for r in rows] == ["vacuum@0", "vacuum@1", "bernoulli@0", "bernoulli@1"]
    assert "hardware_reference_pct_noncomparable" in rows[0]


def test_hardware_reference_is_labelled():
    r = BenchReport("grasp", {}, 0, [Condition("vacuum@0.25", 2, 1, hardware_reference_pct=90.0)])
    assert "not comparable" in r.summary()
    assert "not comparable" in r.to_dict()["note"]
    assert r.conditions[0].success_rate == 0.5 and Condition("x").success_rate == 0.0


def test_board_seeds_distinct():
    seeds = {board_seed(0, c, t) for c in (0.25, 0.5, 0.75) for t in range(30)}
    assert len(seeds) == 90


def test_spawn_failure_is_environment_error(monkeypatch):
    def boom(*a, **k):
        raise OSError("address in use")
    monkeypatch.setattr(bench.EmulatorServer, "start", boom)
    with pytest.raises(EnvironmentError):
        bench_grasping(("vacuum",), (0.0,), trials_per_cell=1)
    assert issubclass(EmulatorSpawnError, EnvironmentError)
    with pytest.raises(ValueError):
        bench_grasping(("magnet",), (0.0,), trials_per_cell=1)


def test_policy_ablation_errors_and_empty(tmp_path):
    empty = bench_policy_ablation(("full",), episodes=0, param_dir=tmp_path)
    assert empty.conditions == [] and empty.trials == 0
    with pytest.raises(ConfigurationError):
        bench_policy_ablation(("full",), episodes=1, param_dir=tmp_path)
    with pytest.raises(ConfigurationError):
        bench_policy_ablation(("bogus",), episodes=1, param_dir=tmp_path)
    DiffusionPolicy(PolicyConfig(ablation="no-attn")).save(tmp_path / "policy_full.f8")
    with pytest.raises(ConfigurationError):
        bench_policy_ablation(("full",), episodes=1, param_dir=tmp_path)


def test_policy_ablation_runs_untrained(tmp_path):
    for abl in ("full", "workspace-only"):
        DiffusionPolicy(PolicyConfig(ablation=abl)).save(tmp_path / f"policy_{abl}.f8")
    r = bench_policy_ablation(episodes=1, param_dir=tmp_path)
    assert [c.name for c in r.conditions] == ["full", "workspace-only"]
    assert set(r.checks) == {"full_at_least_workspace_only", "workspace_only_lowest"}
    assert r.conditions[0].hardware_reference_pct == 73.3


def test_demo_collect_writes_files(tmp_path):
    paths = demo_collect(2, tmp_path / "d", family="flat", seed=1)
    assert len(paths) == 2 and all(p.exists() for p in paths)


def test_cli_parser_defaults():
    a = build_parser().parse_args(["bench", "grasp"])
    assert a.modes == ["vacuum", "bernoulli"] and a.coverages == [0.25, 0.5, 0.75] and a.trials == 30
    a = build_parser().parse_args(["bench", "policy", "--ablation", "full,no-attn"])
    assert a.ablation == ["full", "no-attn"] and a.episodes == 30
    with pytest.raises(SystemExit):
        build_parser().parse_args(["demo", "collect", "--family", "staircase"])


def test_cli_grasp_writes_report(tmp_path, capsys):
    out = tmp_path / "g.json"
    rc = main(["bench", "grasp", "--modes", "vacuum", "--coverages", "0", "--trials", "1", "--out", str(out)])
    assert rc == 0 and out.exists() and out.with_suffix(".csv").exists()
    assert "vacuum@0: 1/1" in capsys.readouterr().out


def test_cli_errors_exit_2(tmp_path, capsys):
    rc = main(["bench", "policy", "--ablation", "full", "--episodes", "1", "--params", str(tmp_path)])
    assert rc == 2 and "missing parameter file" in capsys.readouterr().err
    assert main(["bench", "grasp", "--modes", "magnet", "--trials", "1"]) == 2


def test_cli_demo_collect_and_train(tmp_path, capsys):
    d = tmp_path / "demos"
    assert main(["demo", "collect", "--n", "2", "--out", str(d)]) == 0
    assert len(list(d.glob("*.jsonl"))) == 2
    p = tmp_path / "pol"
    assert main(["policy", "train", "--demos", str(d), "--ablation", "workspace-only", "--steps", "3",
                 "--out", str(p)]) == 0
    assert (p / "policy_workspace-only.f8").exists()
    assert main(["bench", "policy", "--ablation", "workspace-only", "--episodes", "1", "--params", str(p)]) == 0
