"""Final accuracy as the number of clients grows (same total data).

    python3 scripts/client_count.py --clients 5,10 --seeds 0,1,2,3,4
"""

import argparse

import numpy as np

from fedbayes.experiment import ExperimentConfig, final_accuracy, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clients", default="5,10")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    for n in (int(v) for v in args.clients.split(",")):
        acc: dict[str, list[float]] = {}
        for s in (int(v) for v in args.seeds.split(",")):
            for mode, a in final_accuracy(run_experiment(ExperimentConfig(seed=s, n_clients=n), args.workers)).items():
                acc.setdefault(mode, []).append(a)
        print(f"clients={n} " + " ".join(f"{m}={np.mean(v):.4f}" for m, v in acc.items()))


if __name__ == "__main__":
    main()
