"""Rank noisy-expert pools with the ground-truth scorer and test the pool-size gaps.

    python3 scripts/ranking_experiment.py --trials 100 --out ranking.csv
"""
import argparse

import numpy as np

from nwm.evalkit import to_csv
from nwm.experiments import paired_gap, ranking_study


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--trials", type=int, default=100)
    parser.add_argument("--pools", type=int, nargs="+", default=[16, 32])
    parser.add_argument("--noise", type=float, default=0.3)
    parser.add_argument("--evals", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="optional per-trial CSV")
    args = parser.parse_args()

    rows = ranking_study(args.trials, tuple(args.pools), args.noise, args.evals, args.seed)
    names = ["random"] + [f"best-of-{p}" for p in sorted(args.pools)]
    for metric in ("final_error", "ate"):
        columns = {n: [r[f"{n}/{metric}"] for r in rows] for n in names}
        print(metric, "  ".join(f"{n} {np.mean(v):.4f}" for n, v in columns.items()))
        for worse, better in zip(names, names[1:]):
            gap = paired_gap(columns[worse], columns[better])
            print(f"  {worse} - {better}: mean {gap['mean_gap']:+.4f}, p {gap['p_value']:.2e}, "
                  f"{gap['wins']} wins / {gap['losses']} losses")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(to_csv(rows))


if __name__ == "__main__":
    main()
