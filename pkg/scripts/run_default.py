"""Default benchmark: three modes, 20 rounds, 5 clients, Dirichlet(0.1) blobs.

    python3 scripts/run_default.py --out runs/default --seeds 0,1,2,3,4
"""

import argparse
from pathlib import Path

import numpy as np

from fedbayes.experiment import ExperimentConfig, final_accuracy, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    acc: dict[str, list[float]] = {}
    for s in (int(v) for v in args.seeds.split(",")):
        rows = run_experiment(ExperimentConfig(seed=s, out=str(Path(args.out) / f"seed{s}")), args.workers)
        for mode, a in final_accuracy(rows).items():
            acc.setdefault(mode, []).append(a)
    for mode, vals in acc.items():
        print(f"{mode:20s} mean={np.mean(vals):.4f} std={np.std(vals):.4f} n={len(vals)}")


if __name__ == "__main__":
    main()
