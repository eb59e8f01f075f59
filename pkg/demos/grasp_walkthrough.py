"""Run the perception-driven grasp controller on a few boards and narrate each episode.

    python demos/grasp_walkthrough.py [coverage ...]
"""
import sys
from collections import Counter

from flexicup.controller import ControllerParams, run_local_episode
from flexicup.physics import cup_config
from flexicup.scene import feasible_positions, generate_board


def narrate(coverage, seed):
    board = generate_board(coverage, seed=seed)
    feasible = feasible_positions(board, cup_config("I"))
    result = run_local_episode(board, "I", ControllerParams())
    visits = Counter(phase.value for _, phase in result.trajectory)
    print(f"coverage {coverage:.2f}, seed {seed}: {len(feasible)} feasible cup positions")
    print("  " + ", ".join(f"{name} {n}" for name, n in visits.items()))
    verdict = "attached and placed" if result.success else f"gave up ({result.failure_reason.value})"
    print(f"  {verdict} after {result.steps_taken} search steps, {result.controller_steps} controller steps\n")


if __name__ == "__main__":
    coverages = [float(c) for c in sys.argv[1:]] or [0.0, 0.25, 0.5, 0.75]
    for i, cov in enumerate(coverages):
        narrate(cov, seed=100 + i)
