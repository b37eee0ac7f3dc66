"""Meta-selected learning rate vs each fixed candidate, per noise level.

    python3 scripts/lr_selection.py --epsilons 0.001,0.01,0.1 --seeds 0,1,2,3,4
"""

import argparse

import numpy as np

from fedbayes.experiment import ExperimentConfig, final_accuracy, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epsilons", default="0.001,0.01,0.1")
    ap.add_argument("--candidates", default="0.0001,0.001,0.01")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--schedule", action="store_true", help="use the three decaying schedules as candidates")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    cands = [float(v) for v in args.candidates.split(",")]
    modes = [f"bayfl_fixed@{c:g}" for c in cands] + ["meta_bayfl"]
    extra = dict(candidate_mode="schedule") if args.schedule else {}
    for eps in (float(v) for v in args.epsilons.split(",")):
        acc: dict[str, list[float]] = {}
        for s in (int(v) for v in args.seeds.split(",")):
            cfg = ExperimentConfig(seed=s, modes=modes, noise_eps=eps, candidates=cands, **extra)
            for mode, a in final_accuracy(run_experiment(cfg, args.workers)).items():
                acc.setdefault(mode, []).append(a)
        print(f"eps={eps:g} " + " ".join(f"{m}={np.mean(v):.4f}" for m, v in acc.items()))


if __name__ == "__main__":
    main()
