"""``flexicup`` command line: benchmarks, demonstration collection, policy training, emulator."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

log = logging.getLogger("flexicup")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _emit(report, out, timing: bool):
    print(report.summary())
    if out:
        path = report.write(out, include_timing=timing)
        print(f"wrote {path} and {Path(path).with_suffix('.csv')}")


def cmd_bench_grasp(args):
    from .bench import bench_grasping
    from .controller import ControllerParams
    report = bench_grasping(args.modes, args.coverages, args.trials, args.seed,
                            params=ControllerParams(step_cm=args.step_cm), log=log.info)
    _emit(report, args.out, args.timing)


def cmd_bench_classify(args):
    from .bench import bench_classification
    report = bench_classification(args.seed, args.variations)
    _emit(report, args.out, args.timing)


def cmd_bench_policy(args):
    from .bench import bench_policy_ablation
    report = bench_policy_ablation(args.ablation, args.episodes, args.seed, args.params, log=log.info)
    _emit(report, args.out, args.timing)


def cmd_demo_collect(args):
    from .bench import demo_collect
    paths = demo_collect(args.n, args.out, args.family, args.seed)
    print(f"wrote {len(paths)} demonstrations to {args.out}")


def cmd_policy_train(args):
    from .policy.model import PolicyConfig, with_ablation
    from .policy.task import build_dataset, load_demos, train_policy
    demos = load_demos(args.demos)
    if not demos:
        raise SystemExit(f"no demonstrations found in {args.demos}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = PolicyConfig(seed=args.seed)
    for abl in args.ablation:
        cfg = with_ablation(base, abl)
        data = build_dataset(demos, cfg.history, cfg.horizon)
        t0 = time.perf_counter()
        policy, losses = train_policy(cfg, data, steps=args.steps, batch_size=args.batch, lr=args.lr,
                                      seed=args.seed, log=log.info)
        path = out / f"policy_{abl}.f8"
        policy.save(path)
        print(f"{abl}: final loss {losses[-1]:.4f} after {args.steps} steps "
              f"({time.perf_counter() - t0:.0f} s) -> {path}")


def cmd_emulate(args):
    from .emulator import emulator_serve
    from .scene import Scene, flat_scene
    scene = Scene.from_json(Path(args.scene).read_text()) if args.scene else flat_scene()
    srv = emulator_serve(scene, args.config, args.listen)
    print(f"emulating config {args.config} on {srv.endpoint}", flush=True)
    try:
        while srv._thread.is_alive():
            srv._thread.join(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        srv.stop()


def build_parser() -> argparse.ArgumentParser:
    from .policy.model import ABLATIONS
    from .policy.task import SCENE_FAMILIES

    p = argparse.ArgumentParser(prog="flexicup", description="Dual-mode suction cup simulator and benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run a benchmark suite").add_subparsers(dest="suite", required=True)

    def outputs(sp):
        sp.add_argument("--out", help="report path (.json); a .csv twin is written beside it")
        sp.add_argument("--timing", action="store_true", help="include wall-clock runtime in the JSON report")

    g = bench.add_parser("grasp", help="grasping success over obstacle boards")
    g.add_argument("--modes", type=_names, default=["vacuum", "bernoulli"])
    g.add_argument("--coverages", type=_floats, default=[0.25, 0.5, 0.75])
    g.add_argument("--trials", type=int, default=30, help="trials per (mode, coverage) cell")
    g.add_argument("--step-cm", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    outputs(g)
    g.set_defaults(func=cmd_bench_grasp)

    c = bench.add_parser("classify", help="confusion matrices per fusion mode")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--variations", type=int, default=10)
    outputs(c)
    c.set_defaults(func=cmd_bench_classify)

    pol = bench.add_parser("policy", help="evaluate trained policies on inclined transport")
    pol.add_argument("--ablation", type=_names, default=list(ABLATIONS),
                     help=f"comma-separated subset of {','.join(ABLATIONS)}")
    pol.add_argument("--episodes", type=int, default=30)
    pol.add_argument("--seed", type=int, default=10_000)
    pol.add_argument("--params", default="policies", help="directory holding policy_<ablation>.f8 files")
    outputs(pol)
    pol.set_defaults(func=cmd_bench_policy)

    demo = sub.add_parser("demo", help="demonstrations").add_subparsers(dest="action", required=True)
    dc = demo.add_parser("collect", help="scripted demonstrations as JSON-lines files")
    dc.add_argument("--n", type=int, default=50)
    dc.add_argument("--family", choices=SCENE_FAMILIES, default="inclined")
    dc.add_argument("--seed", type=int, default=0)
    dc.add_argument("--out", default="demos_out")
    dc.set_defaults(func=cmd_demo_collect)

    policy = sub.add_parser("policy", help="policy training").add_subparsers(dest="action", required=True)
    tr = policy.add_parser("train", help="train one parameter file per ablation")
    tr.add_argument("--demos", default="demos_out")
    tr.add_argument("--ablation", type=_names, default=["full", "workspace-only"])
    tr.add_argument("--steps", type=int, default=3000)
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", default="policies")
    tr.set_defaults(func=cmd_policy_train)

    em = sub.add_parser("emulate", help="serve the device protocol for a scene")
    em.add_argument("--scene", help="scene JSON (default: flat clear board)")
    em.add_argument("--listen", help="host:port (default: $FLEXICUP_ENDPOINT or 127.0.0.1:47600)")
    em.add_argument("--config", default="I", help="cup configuration id")
    em.set_defaults(func=cmd_emulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    from .bench import ConfigurationError, EmulatorSpawnError
    try:
        args.func(args)
    except (ConfigurationError, EmulatorSpawnError, ValueError) as e:
        print(f"flexicup: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
