"""Collect scripted demonstrations, train the diffusion policy and roll it out.

    python demos/policy_pipeline.py [train_steps]

With the default 3000 steps this takes several minutes per policy on one core.
"""
import sys
import time

from flexicup.policy.task import collect_demos, train_and_evaluate

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
t0 = time.perf_counter()
demos = collect_demos(50, seed=0)
print(f"50 demonstrations, {sum(len(d.actions) for d in demos)} steps, {time.perf_counter() - t0:.0f} s")
tilts = [abs(d.episode.scene.incline_deg - d.states[-1][3]) for d in demos]
print(f"expert finishes within {max(tilts):.1f} deg of the incline on every demo")
res = train_and_evaluate(demos, ("full", "workspace-only"), episodes=30, steps=steps,
                         log=lambda m: print(" ", m, flush=True))
for name, r in res.items():
    print(f"{name:15s} {r['successes']:2d}/30 successes, final loss {r['final_loss']:.3f}, "
          f"train {r['train_s']:.0f} s, eval {r['eval_s']:.0f} s")
print(f"total {time.perf_counter() - t0:.0f} s")
