"""Data fraction x noise level grid, deterministic FedAvg vs fixed-lr Bayesian clients.

    python3 scripts/noise_fraction_sweep.py --out runs/grid --seeds 0,1,2
"""

import argparse

from fedbayes.experiment import ExperimentConfig, sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--fractions", default="1.0,0.5,0.25,0.1")
    ap.add_argument("--epsilons", default="0,0.0001,0.001,0.01,0.1")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    modes = ["fedavg_det", "bayfl_fixed@0.0001", "bayfl_fixed@0.001", "bayfl_fixed@0.01"]
    cfg = ExperimentConfig(modes=modes, out=args.out)
    table = sweep(cfg, [float(v) for v in args.fractions.split(",")], [float(v) for v in args.epsilons.split(",")],
                  [int(v) for v in args.seeds.split(",")], args.workers)
    cols = [c for c in table[0] if c not in ("fraction", "epsilon")]
    print("fraction epsilon " + " ".join(cols))
    for row in table:
        print(f"{row['fraction']:g} {row['epsilon']:g} " + " ".join(f"{row[c]:.4f}" for c in cols))


if __name__ == "__main__":
    main()
