"""CEM in an empty room with the ground-truth simulator, with and without action constraints.

    python3 scripts/planning_experiment.py --trials 100
"""
import argparse

import numpy as np

from nwm.experiments import constraint_study
from nwm.planner import CONSTRAINTS


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--trials", type=int, default=100)
    parser.add_argument("--evals", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--constraints", nargs="+", default=list(CONSTRAINTS), choices=CONSTRAINTS)
    args = parser.parse_args()

    study = constraint_study(args.trials, args.constraints, args.evals, args.seed)
    for name, trials in study.items():
        errors = np.array([t["position_error"] for t in trials])
        poses = np.array([t["pose_error"] for t in trials])
        print(f"{name:>22}: within 0.5 units {np.mean(errors <= 0.5):.0%}, mean position error "
              f"{errors.mean():.4f}, mean pose error {poses.mean():.4f}")


if __name__ == "__main__":
    main()
