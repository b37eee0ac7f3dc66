"""Experiment orchestration: config, population building, K-round runs, sweeps, outputs."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bnn, datahub
from .bnn import BAYESIAN, DETERMINISTIC, Prior
from .datahub import Dataset, Partition
from .fedcore import (
    BAYFL_FIXED,
    META_BAYFL,
    ClientState,
    DivergenceError,
    GlobalModel,
    RoundMode,
    RoundReport,
    evaluate,
    run_round,
    schedule_candidates,
    union_test,
)
from .numkernel import SeedPath, derive_rng

log = logging.getLogger(__name__)

SCHEMA = 1
INIT_NS, SHARD_NS = 0x1A, 0x5C
CSV_HEADER = ("run", "mode", "round", "scope", "metric", "value")

__all__ = [
    "ConfigError", "ExperimentConfig", "MetricsRow", "Population", "evaluate", "build_population",
    "partitioned_dataset", "run_experiment", "run_mode", "sweep", "emit_csv", "read_csv", "emit_plotdata",
    "load_config", "parse_config", "dump_config", "parse_mode", "final_accuracy", "global_series",
]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schema: int = SCHEMA
    run_id: str = "run"
    # data source
    source: str = "synth"
    synth_classes: int = 10
    synth_dim: int = 20
    synth_per_class: int = 600
    synth_spread: float = 0.35
    idx_images: str = ""
    idx_labels: str = ""
    csv_path: str = ""
    csv_classes: int = 0
    # corruption
    noise_mode: str = datahub.FEATURE_GAUSS
    noise_eps: float = 0.0
    data_fraction: float = 1.0
    # partition
    partition: str = "dirichlet"
    alpha: float = 0.1
    min_client_samples: int = 10
    step_major: int = 2
    step_major_per: int = 1960
    step_minor_per: int = 10
    step_replacement: bool = False
    n_clients: int = 5
    meta_overlap: bool = False
    # protocol
    rounds: int = 20
    local_epochs: int = 5
    t_temp: int = 1
    batch_size: int = 32
    candidates: list[float] = field(default_factory=lambda: [0.0001, 0.001, 0.01])
    candidate_mode: str = "list"
    schedule_a: float = 0.01
    fixed_lr: float = 0.01
    meta_eval_on: str = "meta"
    aggregation: str = "uniform"
    modes: list[str] = field(default_factory=lambda: ["fedavg_det", "bayfl_fixed", "meta_bayfl"])
    # model
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    prior_mu: float = 0.0
    prior_sigma: float = 1.0
    init_sigma: float = 0.05
    kl_scale: str = "per_batch"
    nll_reduction: str = "sum"
    n_mc_train: int = 1
    n_mc_eval: int = 10
    seed: int = 0
    out: str = ""

    def validate(self) -> "ExperimentConfig":
        def need(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        need(self.schema == SCHEMA, f"unsupported config schema {self.schema}")
        need(self.source in ("synth", "idx", "csv"), f"unknown source {self.source!r}")
        if self.source == "idx":
            need(bool(self.idx_images and self.idx_labels), "idx source needs idx_images and idx_labels")
        if self.source == "csv":
            need(bool(self.csv_path) and self.csv_classes >= 1, "csv source needs csv_path and csv_classes")
        need(min(self.synth_classes, self.synth_dim, self.synth_per_class) >= 1, "synth counts must be >= 1")
        need(self.synth_spread > 0, "synth_spread must be positive")
        need(self.noise_mode in (datahub.FEATURE_GAUSS, datahub.LABEL_FLIP), f"unknown noise_mode {self.noise_mode!r}")
        need(self.noise_eps >= 0, "noise_eps must be >= 0")
        need(self.noise_mode != datahub.LABEL_FLIP or self.noise_eps <= 1, "label_flip noise_eps must be <= 1")
        need(0 < self.data_fraction <= 1, "data_fraction must be in (0, 1]")
        need(self.partition in ("dirichlet", "step", "iid"), f"unknown partition {self.partition!r}")
        need(self.alpha > 0, "alpha must be positive")
        need(self.n_clients >= 1, "n_clients must be >= 1")
        need(self.partition != "dirichlet" or self.n_clients >= 2, "dirichlet partition needs n_clients >= 2")
        need(self.min_client_samples >= 1, "min_client_samples must be >= 1")
        need(min(self.rounds, self.local_epochs, self.t_temp, self.batch_size) >= 1,
             "rounds, local_epochs, t_temp and batch_size must be >= 1")
        need(bool(self.candidates) and all(c > 0 for c in self.candidates)
             and len(set(self.candidates)) == len(self.candidates),
             "candidates must be non-empty, positive and distinct")
        need(self.candidate_mode in ("list", "schedule"), f"unknown candidate_mode {self.candidate_mode!r}")
        need(self.schedule_a > 0 and self.fixed_lr > 0, "schedule_a and fixed_lr must be positive")
        need(self.meta_eval_on in ("meta", "test"), "meta_eval_on must be meta or test")
        need(self.aggregation in ("uniform", "by_train_size"), f"unknown aggregation {self.aggregation!r}")
        need(bool(self.modes), "at least one mode is required")
        for m in self.modes:
            parse_mode(m, self.fixed_lr)
        need(all(h >= 1 for h in self.hidden), "hidden widths must be >= 1")
        need(self.prior_sigma > 0 and self.init_sigma > 0, "prior_sigma and init_sigma must be positive")
        if self.kl_scale not in ("per_sample", "per_batch"):
            try:
                need(float(self.kl_scale) >= 0, "kl_scale must be >= 0")
            except ValueError:
                raise ConfigError(f"kl_scale must be per_sample, per_batch or a number, got {self.kl_scale!r}") from None
        need(self.nll_reduction in ("sum", "mean"), "nll_reduction must be sum or mean")
        need(self.n_mc_train >= 1 and self.n_mc_eval >= 1, "Monte-Carlo sample counts must be >= 1")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        return self

    @property
    def prior(self) -> Prior:
        return Prior(self.prior_mu, self.prior_sigma)


def parse_mode(text: str, fixed_lr: float) -> RoundMode:
    """``meta_bayfl``, ``bayfl_fixed``, ``fedavg_det`` with optional ``@lr``."""
    kind, _, lr = text.partition("@")
    try:
        lr_val = float(lr) if lr else None
        if kind == META_BAYFL:
            if lr_val is not None:
                raise ConfigError(f"mode {text!r}: meta_bayfl takes no fixed lr")
            return RoundMode(kind)
        return RoundMode(kind, lr_val if lr_val is not None else fixed_lr)
    except ValueError as exc:
        raise ConfigError(f"bad mode {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# config file: flat key=value lines, '#' comments
# ---------------------------------------------------------------------------

def _field_types() -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(ExperimentConfig)}


def coerce_value(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    t = types[key]
    raw = raw.strip()
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if t == "list[float]":
            return [float(v) for v in raw.split(",") if v.strip()]
        if t == "list[int]":
            return [int(v) for v in raw.split(",") if v.strip()]
        if t == "list[str]":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce_value(key, raw)
    if "schema" not in values and text.strip():
        raise ConfigError("config file lacks the schema key")
    for key, raw in (overrides or {}).items():
        values[key] = coerce_value(key, raw)
    return ExperimentConfig(**values).validate()


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(), overrides)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

@dataclass
class Population:
    dataset: Dataset
    partition: Partition
    clients: list[ClientState]
    global_test: Dataset

    def shard_manifest(self) -> str:
        lines = ["client_id\tshard\tsample_index"]
        for c in self.clients:
            for name in ("train", "meta", "test"):
                lines.extend(f"{c.id}\t{name}\t{int(i)}" for i in getattr(c.shards, name).ids)
        return "\n".join(lines) + "\n"


def load_source(cfg: ExperimentConfig) -> Dataset:
    if cfg.source == "synth":
        return datahub.synth_blobs(cfg.synth_classes, cfg.synth_dim, cfg.synth_per_class, cfg.synth_spread, cfg.seed)
    if cfg.source == "idx":
        return datahub.load_idx(cfg.idx_images, cfg.idx_labels)
    return datahub.load_csv(cfg.csv_path, cfg.csv_classes)


def make_partition(cfg: ExperimentConfig, ds: Dataset) -> Partition:
    if cfg.partition == "dirichlet":
        return datahub.partition_dirichlet(ds, cfg.n_clients, cfg.alpha, cfg.seed, cfg.min_client_samples)
    if cfg.partition == "step":
        return datahub.partition_step(ds, cfg.n_clients, cfg.step_major, cfg.step_major_per, cfg.step_minor_per,
                                      cfg.seed, cfg.step_replacement)
    return datahub.partition_iid(ds, cfg.n_clients, cfg.seed)


def partitioned_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Partition]:
    """Source -> noise -> subsample -> partition."""
    ds = load_source(cfg)
    ds = datahub.inject_noise(ds, cfg.noise_eps, cfg.noise_mode, cfg.seed)
    ds = datahub.subsample(ds, cfg.data_fraction, cfg.seed)
    return ds, make_partition(cfg, ds)


def build_population(cfg: ExperimentConfig) -> Population:
    """Partitioned dataset split into client shards. Mode-independent by construction."""
    ds, part = partitioned_dataset(cfg)
    clients = []
    for n in range(part.n_clients):
        shards = datahub.make_shards(part.client_data(ds, n), SeedPath(cfg.seed, (SHARD_NS, n)),
                                     meta_overlap=cfg.meta_overlap)
        clients.append(ClientState(
            id=n, shards=shards, lr_candidates=list(cfg.candidates), t_temp=cfg.t_temp,
            local_epochs=cfg.local_epochs, batch_size=cfg.batch_size, n_mc_train=cfg.n_mc_train,
            n_mc_eval=cfg.n_mc_eval, kl_scale=_kl_policy(cfg.kl_scale), nll_reduction=cfg.nll_reduction,
            meta_eval_on=cfg.meta_eval_on,
        ))
    return Population(ds, part, clients, union_test(clients))


def _kl_policy(v: str):
    return v if v in ("per_sample", "per_batch") else float(v)


def initial_model(cfg: ExperimentConfig, dim: int, n_classes: int, mode: RoundMode) -> GlobalModel:
    net = bnn.init_net([dim, *cfg.hidden, n_classes], derive_rng(SeedPath(cfg.seed, (INIT_NS,))), cfg.init_sigma)
    if mode.kind == "fedavg_det":
        net.mode = DETERMINISTIC
    return GlobalModel(net, 0)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    run: str
    mode: str
    round: int
    scope: str
    metric: str
    value: float


def _rows_for(run: str, rep: RoundReport) -> list[MetricsRow]:
    k = rep.round + 1
    rows = [MetricsRow(run, rep.mode, k, "global", "test_accuracy", rep.global_accuracy),
            MetricsRow(run, rep.mode, k, "global", "test_loss", rep.global_loss)]
    for c in rep.clients:
        scope = f"client{c.id}"
        rows += [MetricsRow(run, rep.mode, k, scope, "test_accuracy", c.test_accuracy),
                 MetricsRow(run, rep.mode, k, scope, "test_loss", c.test_loss),
                 MetricsRow(run, rep.mode, k, scope, "selected_lr", c.selected_lr)]
        rows += [MetricsRow(run, rep.mode, k, scope, f"meta_loss_{i}", v)
                 for i, v in enumerate(c.meta_losses) if math.isfinite(v)]
    return rows


def run_mode(cfg: ExperimentConfig, pop: Population, mode: RoundMode, workers: int | None = None,
             on_round=None) -> tuple[GlobalModel, list[RoundReport]]:
    g = initial_model(cfg, pop.dataset.dim, pop.dataset.n_classes, mode)
    seed = SeedPath(cfg.seed)
    clients = pop.clients
    reports = []
    for k in range(cfg.rounds):
        if cfg.candidate_mode == "schedule":
            cands = schedule_candidates(cfg.schedule_a, k + 1, cfg.rounds)
            clients = [replace(c, lr_candidates=cands) for c in pop.clients]
        g, rep = run_round(g, clients, cfg.prior, mode, seed, pop.global_test, workers, cfg.aggregation)
        reports.append(rep)
        if on_round is not None:
            on_round(rep)
    return g, reports


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[MetricsRow]:
    """Run every configured mode on one shared population; write outputs if ``cfg.out`` is set.

    On divergence the rows gathered so far are still written, next to an
    ``INCOMPLETE`` sentinel, and the error is re-raised.
    """
    cfg.validate()
    pop = build_population(cfg)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.snapshot").write_text(dump_config(cfg))
        (out / "partition.manifest").write_text(pop.partition.manifest(pop.dataset))
        (out / "INCOMPLETE").unlink(missing_ok=True)
    rows: list[MetricsRow] = []
    try:
        for m in cfg.modes:
            mode = parse_mode(m, cfg.fixed_lr)
            log.info("run %s: mode %s, %d rounds", cfg.run_id, mode.label, cfg.rounds)
            run_mode(cfg, pop, mode, workers, on_round=lambda rep: rows.extend(_rows_for(cfg.run_id, rep)))
    except DivergenceError as exc:
        if out is not None:
            emit_csv(rows, out / "metrics.csv")
            (out / "INCOMPLETE").write_text(f"{exc}\n")
        raise
    if out is not None:
        emit_csv(rows, out / "metrics.csv")
        emit_plotdata(rows, out / "plot")
    return rows


def final_accuracy(rows: Sequence[MetricsRow]) -> dict[str, float]:
    """Last-round global test accuracy per mode label."""
    best: dict[str, tuple[int, float]] = {}
    for r in rows:
        if r.scope == "global" and r.metric == "test_accuracy":
            if r.mode not in best or r.round > best[r.mode][0]:
                best[r.mode] = (r.round, r.value)
    return {m: v for m, (_, v) in best.items()}


def global_series(rows: Sequence[MetricsRow], mode: str, metric: str) -> list[float]:
    pts = sorted((r.round, r.value) for r in rows if r.mode == mode and r.scope == "global" and r.metric == metric)
    return [v for _, v in pts]


def sweep(cfg: ExperimentConfig, fractions: Sequence[float], epsilons: Sequence[float],
          seeds: Sequence[int] | None = None, workers: int | None = None) -> list[dict]:
    """Final global accuracy per (|D| fraction, noise) cell and mode, averaged over seeds.

    Every cell reuses the same seeds, so cells are paired. Writes
    ``sweep.csv`` and per-cell run directories under ``cfg.out`` if set.
    """
    if not fractions or not epsilons:
        raise ConfigError("sweep grid must be non-empty")
    seeds = list(seeds) if seeds else [cfg.seed]
    table = []
    for f in fractions:
        for e in epsilons:
            acc: dict[str, list[float]] = {}
            for s in seeds:
                cell_out = str(Path(cfg.out) / f"cell_f{f!r}_e{e!r}_s{s}") if cfg.out else ""
                cell = replace(cfg, data_fraction=f, noise_eps=e, seed=s, out=cell_out,
                               run_id=f"{cfg.run_id}_f{f!r}_e{e!r}_s{s}")
                for mode, v in final_accuracy(run_experiment(cell, workers)).items():
                    acc.setdefault(mode, []).append(v)
            table.append({"fraction": f, "epsilon": e, **{m: float(np.mean(v)) for m, v in acc.items()}})
    if cfg.out:
        write_table(table, Path(cfg.out) / "sweep.csv")
    return table


def write_table(table: list[dict], path) -> None:
    cols = list(table[0].keys()) if table else ["fraction", "epsilon"]
    for row in table:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(format(row[c], ".17g") if c in row else "" for c in cols) + "\n")


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def emit_csv(rows: Sequence[MetricsRow], path) -> None:
    """Fixed header, 17 significant digits, LF line endings."""
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for r in rows:
        if not math.isfinite(r.value):
            raise ValueError(f"non-finite metric value in row {r}")
        buf.write(f"{r.run},{r.mode},{r.round},{r.scope},{r.metric},{r.value:.17g}\n")
    Path(path).write_bytes(buf.getvalue().encode())


def read_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(r[0], r[1], int(r[2]), r[3], r[4], float(r[5])) for r in reader]


def emit_plotdata(rows: Sequence[MetricsRow], directory) -> list[Path]:
    """One ``<mode>_<metric>.dat`` file of ``round value`` lines per global series."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for r in rows:
        if r.scope == "global":
            series.setdefault((r.mode, r.metric), []).append((r.round, r.value))
    paths = []
    for (mode, metric), pts in sorted(series.items()):
        p = d / f"{mode}_{metric}.dat"
        p.write_bytes("".join(f"{k} {v:.17g}\n" for k, v in sorted(pts)).encode())
        paths.append(p)
    return paths
