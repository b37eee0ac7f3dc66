"""Command-line front end.

    fedbayes run --config exp.cfg --out runs/a --rounds 5 --modes meta_bayfl
    fedbayes sweep --config exp.cfg --out runs/grid --fractions 1,0.1 --epsilons 0,0.1 --seeds 0,1,2
    fedbayes partition --config exp.cfg --out runs/p
    fedbayes gradcheck --seed 7
    fedbayes klcheck --seed 7
    fedbayes version

Any config key can be overridden as ``--key value``; overrides are applied
after the config file is read and before validation. Exit codes: 0 success,
1 invalid input (nothing written), 2 divergence during a run (partial output
next to an ``INCOMPLETE`` file).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, checks, datahub, experiment
from .experiment import ConfigError, ExperimentConfig
from .fedcore import DivergenceError

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
GRAD_TOL, KL_TOL = 1e-4, 1e-6

log = logging.getLogger("fedbayes")


class CliError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbayes", description="Federated Bayesian MLP experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key=value config file (defaults if omitted)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int, default=None,
                        help="client threads per round (default: FEDBAYES_THREADS, 0 = all cores)")
        return sp

    with_config(sub.add_parser("run", help="run every configured mode on one population"))
    sw = with_config(sub.add_parser("sweep", help="grid over data fraction and noise level"))
    sw.add_argument("--fractions", default="1.0")
    sw.add_argument("--epsilons", default="0.0")
    sw.add_argument("--seeds", default="", help="comma-separated master seeds (default: config seed)")
    with_config(sub.add_parser("partition", help="write the partition manifest and print class counts"))
    for name, what in (("gradcheck", "analytic vs finite-difference ELBO gradients"),
                       ("klcheck", "closed-form KL vs numerical quadrature")):
        sp = sub.add_parser(name, help=what)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--cases", type=int, default=None)
    sub.add_parser("version", help="print the package version")
    return p


def _overrides(extra: list[str]) -> dict[str, str]:
    """``--key value`` pairs (also ``--key=value``) left over by argparse."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise CliError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise CliError(f"option --{key} needs a value")
            i += 1
            val = extra[i]
        key = key.replace("-", "_")
        if key in out:
            raise CliError(f"option --{key} given twice")
        out[key] = val
        i += 1
    return out


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--{what}: expected comma-separated numbers, got {text!r}") from None


def load_cli_config(path: str | None, overrides: dict[str, str], out: str | None) -> ExperimentConfig:
    if out is not None:
        overrides = {**overrides, "out": out}
    if path:
        return experiment.load_config(path, overrides)
    return experiment.parse_config("", overrides)


def cmd_run(cfg: ExperimentConfig, workers: int | None) -> int:
    rows = experiment.run_experiment(cfg, workers)
    for mode, acc in experiment.final_accuracy(rows).items():
        print(f"{mode}\tfinal_test_accuracy\t{acc:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args, workers: int | None) -> int:
    seeds = [int(s) for s in _floats(args.seeds, "seeds")] or None
    table = experiment.sweep(cfg, _floats(args.fractions, "fractions"), _floats(args.epsilons, "epsilons"),
                             seeds, workers)
    cols = [c for c in table[0] if c not in ("fraction", "epsilon")]
    print("\t".join(["fraction", "epsilon", *cols]))
    for row in table:
        print("\t".join([repr(row["fraction"]), repr(row["epsilon"]), *(f"{row[c]:.4f}" for c in cols)]))
    return EXIT_OK


def partition_table(ds: datahub.Dataset, part: datahub.Partition) -> str:
    hist = part.histogram(ds)
    lines = ["\t".join(["client", *(f"c{c}" for c in range(ds.n_classes)), "total"])]
    for n, row in enumerate(hist):
        lines.append("\t".join([str(n), *(str(int(v)) for v in row), str(int(row.sum()))]))
    return "\n".join(lines) + "\n"


def cmd_partition(cfg: ExperimentConfig) -> int:
    ds, part = experiment.partitioned_dataset(cfg)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "partition.manifest").write_text(part.manifest(ds))
    sys.stdout.write(partition_table(ds, part))
    return EXIT_OK


def cmd_check(kind: str, seed: int, cases: int | None) -> int:
    if kind == "gradcheck":
        res = checks.gradient_check(seed, cases or 10)
        tol, label = GRAD_TOL, "max_relative_error"
    else:
        res = checks.kl_check(seed, cases or 20)
        tol, label = KL_TOL, "max_absolute_error"
    print(f"{kind}\tseed={seed}\tcases={res.cases}\t{label}={res.max_error:.3e}\ttol={tol:g}")
    return EXIT_OK if res.ok(tol) else EXIT_INVALID


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.command == "version":
            if extra:
                raise CliError(f"unexpected arguments {extra}")
            print(__version__)
            return EXIT_OK
        if args.command in ("gradcheck", "klcheck"):
            if extra:
                raise CliError(f"unexpected arguments {extra}")
            return cmd_check(args.command, args.seed, args.cases)
        cfg = load_cli_config(args.config, _overrides(extra), args.out)
        if args.command == "run":
            return cmd_run(cfg, args.workers)
        if args.command == "sweep":
            return cmd_sweep(cfg, args, args.workers)
        return cmd_partition(cfg)
    except DivergenceError as exc:
        print(f"fedbayes: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, ConfigError, datahub.DataFormatError, datahub.CapacityError, datahub.ShardError,
            FileNotFoundError) as exc:
        print(f"fedbayes: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
