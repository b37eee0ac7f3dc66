"""Meta-BayFL rounds: learning-rate selection, local ELBO training, averaging.

Per client and round the procedure is: start from the broadcast global net,
train a temporary copy for ``t_temp`` epochs at every candidate learning
rate, score each copy on the held-out meta shard, then train for ``T``
epochs at the winning rate. The server averages all returned variational
parameters (means and rhos alike).

Every random draw comes from a stream keyed by (round, client, purpose), so a
client's work is a pure function of its inputs and clients can be run in
any order or in parallel.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import bnn
from .bnn import DETERMINISTIC, Prior, VariationalNet
from .datahub import ClientShards, Dataset
from .numkernel import RngStream, SeedPath, derive_rng

# run-level namespaces; client-round paths are (ROUNDS, k, n, purpose, ...)
ROUNDS, EVAL = 0, 6
# purpose tags under a client-round path
META_ORDER, META_NOISE, META_EVAL, TRAIN_ORDER, TRAIN_NOISE = 1, 2, 3, 4, 5

META_BAYFL = "meta_bayfl"
BAYFL_FIXED = "bayfl_fixed"
FEDAVG_DET = "fedavg_det"
MODE_KINDS = (META_BAYFL, BAYFL_FIXED, FEDAVG_DET)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, client: int | None = None, round: int | None = None,
                 epoch: int | None = None, mode: str | None = None):
        super().__init__(message)
        self.client, self.round, self.epoch, self.mode = client, round, epoch, mode

    def __str__(self):
        where = ", ".join(f"{k}={v}" for k, v in
                          (("mode", self.mode), ("round", self.round), ("client", self.client), ("epoch", self.epoch))
                          if v is not None)
        base = super().__str__()
        return f"{base} ({where})" if where else base


class AggregationError(ValueError):
    pass


@dataclass
class GlobalModel:
    net: VariationalNet
    round: int = 0

    def __post_init__(self):
        if self.round < 0:
            raise ValueError("round must be non-negative")


@dataclass
class ClientState:
    id: int
    shards: ClientShards
    lr_candidates: list[float]
    t_temp: int = 1
    local_epochs: int = 1
    batch_size: int = 32
    n_mc_train: int = 1
    n_mc_eval: int = 10
    kl_scale: str | float = "per_batch"
    nll_reduction: str = "sum"
    meta_eval_on: str = "meta"

    def __post_init__(self):
        c = [float(v) for v in self.lr_candidates]
        if not c or any(not v > 0 for v in c) or len(set(c)) != len(c):
            raise ValueError("lr_candidates must be non-empty, positive and duplicate-free")
        if self.t_temp < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("t_temp, local_epochs and batch_size must be >= 1")
        if self.nll_reduction not in ("sum", "mean"):
            raise ValueError("nll_reduction must be 'sum' or 'mean'")
        if self.meta_eval_on not in ("meta", "test"):
            raise ValueError("meta_eval_on must be 'meta' or 'test'")
        self.lr_candidates = c

    def kl_weight(self) -> float:
        """KL multiplier per minibatch.

        ``per_batch`` (1/M for M minibatches) makes one epoch of summed-NLL
        batch losses add up to exactly the negative ELBO of the train shard;
        ``per_sample`` (1/N) does the same for mean-NLL batch losses.
        """
        n = len(self.shards.train)
        if self.kl_scale == "per_sample":
            return 1.0 / n
        if self.kl_scale == "per_batch":
            return 1.0 / math.ceil(n / self.batch_size)
        return float(self.kl_scale)


@dataclass
class LrSelection:
    losses: list[float]
    best_index: int
    best_lr: float


@dataclass(frozen=True)
class RoundMode:
    kind: str
    lr: float | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown mode {self.kind!r}")
        if self.kind != META_BAYFL and (self.lr is None or not self.lr > 0):
            raise ValueError(f"mode {self.kind} needs a positive fixed lr")

    @property
    def label(self) -> str:
        return self.kind if self.lr is None or self.kind == META_BAYFL else f"{self.kind}@{self.lr!r}"


@dataclass
class ClientReport:
    id: int
    selected_lr: float
    meta_losses: list[float]
    train_loss: float
    test_accuracy: float
    test_loss: float


@dataclass
class RoundReport:
    round: int
    mode: str
    clients: list[ClientReport] = field(default_factory=list)
    global_accuracy: float = float("nan")
    global_loss: float = float("nan")


def lr_schedule(kind: str, a: float, k: int, K: int) -> float:
    """Step sizes: constant ``a``, ``a/sqrt(K)``, ``a/k`` or ``a/sqrt(k)``."""
    if k < 1 or K < 1:
        raise ValueError("round k and horizon K must be >= 1")
    if k > K:
        raise ValueError(f"round {k} beyond horizon {K}")
    if not a > 0:
        raise ValueError("scale a must be positive")
    if kind == "const":
        return a
    if kind == "inv_sqrt_K":
        return a / math.sqrt(K)
    if kind == "inv_k":
        return a / k
    if kind == "inv_sqrt_k":
        return a / math.sqrt(k)
    raise ValueError(f"unknown schedule {kind!r}")


def schedule_candidates(a: float, k: int, K: int) -> list[float]:
    """The three decaying schedules at round ``k``, duplicates dropped (they coincide at k=1)."""
    out = []
    for kind in ("inv_sqrt_K", "inv_k", "inv_sqrt_k"):
        v = lr_schedule(kind, a, k, K)
        if v not in out:
            out.append(v)
    return out


def evaluate(net: VariationalNet, ds: Dataset, n_mc: int, rng: RngStream | None) -> tuple[float, float]:
    """Accuracy (argmax, first index wins ties) and mean predictive cross-entropy."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = bnn.predict_batch(net, ds.X, n_mc, rng)
    acc = float(np.mean(np.argmax(probs, axis=1) == ds.y))
    p = probs[np.arange(len(ds)), ds.y]
    loss = float(np.mean(-np.log(np.maximum(p, 1e-300))))
    return acc, loss


def minibatches(n: int, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _finite(net: VariationalNet) -> bool:
    return bool(np.isfinite(net.mu).all() and np.isfinite(net.rho).all())


def train_epochs(net: VariationalNet, data: Dataset, lr: float, prior: Prior, client: ClientState,
                 seed: SeedPath, epochs: int, order_tag: int, noise_tag: int, first_epoch: int = 0) -> float:
    """Minibatch descent on the negative ELBO, in place. Returns the last epoch's mean batch loss.

    With ``nll_reduction="sum"`` each step descends ``sum_i nll_i + w * KL``
    over the batch (the batch share of the full negative ELBO); with
    ``"mean"`` it descends ``mean_i nll_i + w * KL``. ``w`` is
    :meth:`ClientState.kl_weight`. Epoch ``e`` shuffles with
    ``seed.child(order_tag, e)`` and draws weight noise from
    ``seed.child(noise_tag, e)``. Raises ``DivergenceError`` (epoch set) on a
    non-finite loss or parameter. ``first_epoch`` resumes a schedule midway.
    """
    kl_w = client.kl_weight()
    summed = client.nll_reduction == "sum"
    epoch_loss = float("nan")
    for e in range(first_epoch, first_epoch + epochs):
        order = derive_rng(seed.child(order_tag, e))
        noise = derive_rng(seed.child(noise_tag, e))
        total, n_batches = 0.0, 0
        for idx in minibatches(len(data), client.batch_size, order):
            eps = None
            if net.mode == bnn.BAYESIAN:
                eps = [bnn.draw_noise(net, noise) for _ in range(client.n_mc_train)]
            b = len(idx)
            with np.errstate(all="ignore"):
                br, grads = bnn.loss_and_grad(net, data.X[idx], data.y[idx], prior, kl_w / b if summed else kl_w, eps)
                if not math.isfinite(br.loss):
                    raise DivergenceError("non-finite training loss", client=client.id, epoch=e)
                if summed:
                    grads.mu *= b
                    grads.rho *= b
                bnn.sgd_step(net, grads, lr)
            if not _finite(net):
                raise DivergenceError("non-finite parameters after update", client=client.id, epoch=e)
            total += br.loss
            n_batches += 1
        epoch_loss = total / n_batches
    return epoch_loss


def select_best(losses: Sequence[float], candidates: Sequence[float]) -> LrSelection:
    """Argmin over candidate losses; non-finite entries count as +inf."""
    clean = [v if math.isfinite(v) else math.inf for v in losses]
    if all(v == math.inf for v in clean):
        raise DivergenceError("every learning-rate candidate diverged")
    best = min(range(len(clean)), key=lambda i: (clean[i], i))
    return LrSelection(clean, best, float(candidates[best]))


def meta_select_lr(client: ClientState, global_model: GlobalModel, prior: Prior, seed: SeedPath,
                   temp_loss: Callable[[int, float], float] | None = None) -> LrSelection:
    """Pick the candidate rate whose temporary model scores best on the meta shard.

    ``seed`` is the client-round path. All candidates replay the same batch
    order and weight noise; they differ only in learning rate. ``temp_loss``
    replaces the train-and-score step (test seam).
    """
    eval_ds = client.shards.meta if client.meta_eval_on == "meta" else client.shards.test

    def score(i: int, lr: float) -> float:
        net = global_model.net.copy()
        try:
            train_epochs(net, client.shards.train, lr, prior, client, seed, client.t_temp, META_ORDER, META_NOISE)
        except DivergenceError:
            return math.inf
        _, loss = evaluate(net, eval_ds, client.n_mc_eval, derive_rng(seed.child(META_EVAL)))
        return loss

    fn = temp_loss or score
    losses = [float(fn(i, lr)) for i, lr in enumerate(client.lr_candidates)]
    return select_best(losses, client.lr_candidates)


def local_train(client: ClientState, global_model: GlobalModel, lr: float, prior: Prior,
                seed: SeedPath) -> tuple[VariationalNet, float]:
    """Train a copy of the global net for ``local_epochs`` epochs at ``lr``.

    Returns the local net and its final-epoch mean training loss.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    net = global_model.net.copy()
    try:
        loss = train_epochs(net, client.shards.train, lr, prior, client, seed, client.local_epochs,
                            TRAIN_ORDER, TRAIN_NOISE)
    except DivergenceError as exc:
        exc.client, exc.round = client.id, global_model.round
        raise
    return net, loss


def aggregate(locals_: Sequence[VariationalNet], weighting: str = "uniform",
              sizes: Sequence[int] | None = None) -> VariationalNet:
    """Elementwise mean of every tensor, summed in the given (ascending id) order."""
    if not locals_:
        raise AggregationError("nothing to aggregate")
    ref = locals_[0]
    for i, net in enumerate(locals_):
        if net.sizes != ref.sizes:
            raise AggregationError(f"client {i} has layer sizes {net.sizes}, expected {ref.sizes}")
    if weighting == "uniform":
        weights = None
    elif weighting == "by_train_size":
        if sizes is None or len(sizes) != len(locals_):
            raise AggregationError("by_train_size weighting needs one size per client")
        total = float(sum(sizes))
        weights = [s / total for s in sizes]
    else:
        raise AggregationError(f"unknown weighting {weighting!r}")
    flats = []
    for attr in ("mu", "rho"):
        if weights is None:
            acc = getattr(locals_[0], attr).copy()
            for net in locals_[1:]:
                acc += getattr(net, attr)
            acc /= len(locals_)
        else:
            acc = np.zeros_like(getattr(ref, attr))
            for w, net in zip(weights, locals_):
                acc += w * getattr(net, attr)
        flats.append(acc)
    return VariationalNet(mode=ref.mode, sizes=ref.sizes, mu=flats[0], rho=flats[1])


def _client_round(global_model: GlobalModel, client: ClientState, prior: Prior, mode: RoundMode,
                  seed: SeedPath) -> tuple[VariationalNet, ClientReport]:
    cseed = client_seed(seed, global_model.round, client.id)
    start = global_model
    meta_losses: list[float] = []
    if mode.kind == META_BAYFL:
        sel = meta_select_lr(client, start, prior, cseed)
        lr, meta_losses = sel.best_lr, sel.losses
    else:
        lr = mode.lr
        if mode.kind == FEDAVG_DET and start.net.mode != DETERMINISTIC:
            start = GlobalModel(start.net.as_mode(DETERMINISTIC), start.round)
    net, train_loss = local_train(client, start, lr, prior, cseed)
    acc, loss = evaluate(net, client.shards.test, client.n_mc_eval, derive_rng(seed.child(EVAL, client.id)))
    return net, ClientReport(client.id, lr, meta_losses, train_loss, acc, loss)


def client_seed(seed: SeedPath, k: int, n: int) -> SeedPath:
    return seed.child(ROUNDS, k, n)


def worker_count(requested: int | None = None) -> int:
    if requested is None:
        requested = int(os.environ.get("FEDBAYES_THREADS", "1") or 1)
    return requested if requested > 0 else (os.cpu_count() or 1)


def run_round(global_model: GlobalModel, clients: Sequence[ClientState], prior: Prior, mode: RoundMode,
              seed: SeedPath, eval_set: Dataset | None = None, workers: int | None = 1,
              weighting: str = "uniform") -> tuple[GlobalModel, RoundReport]:
    """One broadcast / local-train / average cycle.

    ``seed`` is the run-level path; client streams hang off
    :func:`client_seed`. The new global net is scored on
    ``eval_set`` (default: union of client test shards) with a round-independent stream.
    """
    if not clients:
        raise ValueError("a round needs at least one client")
    clients = sorted(clients, key=lambda c: c.id)
    workers = worker_count(workers)

    def job(c: ClientState):
        return _client_round(global_model, c, prior, mode, seed)

    try:
        if workers > 1 and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=min(workers, len(clients))) as pool:
                results = list(pool.map(job, clients))
        else:
            results = [job(c) for c in clients]
    except DivergenceError as exc:
        exc.round, exc.mode = global_model.round, mode.label
        raise
    nets = [net for net, _ in results]
    new_net = aggregate(nets, weighting, [len(c.shards.train) for c in clients])
    new_global = GlobalModel(new_net, global_model.round + 1)
    report = RoundReport(global_model.round, mode.label, [r for _, r in results])
    if eval_set is None:
        eval_set = union_test(clients)
    n_mc = clients[0].n_mc_eval
    report.global_accuracy, report.global_loss = evaluate(new_net, eval_set, n_mc, derive_rng(seed.child(EVAL)))
    return new_global, report


def union_test(clients: Sequence[ClientState]) -> Dataset:
    tests = [c.shards.test for c in sorted(clients, key=lambda c: c.id)]
    return Dataset(np.concatenate([t.X for t in tests]), np.concatenate([t.y for t in tests]),
                   tests[0].n_classes, "global_test", np.concatenate([t.ids for t in tests]))
