import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbayes import bnn, datahub, fedcore
from fedbayes.bnn import BAYESIAN, DETERMINISTIC, Prior, VariationalNet
from fedbayes.datahub import Dataset
from fedbayes.fedcore import (
    AggregationError,
    ClientState,
    DivergenceError,
    GlobalModel,
    RoundMode,
    aggregate,
    client_seed,
    evaluate,
    local_train,
    lr_schedule,
    meta_select_lr,
    run_round,
    select_best,
)
from fedbayes.numkernel import SeedPath, derive_rng


def blob_clients(n_clients=3, per_class=40, seed=0, **kw):
    ds = datahub.synth_blobs(4, 6, per_class, 0.3, seed)
    part = datahub.partition_dirichlet(ds, n_clients, 1.0, seed, min_size=20) if n_clients > 1 else None
    clients = []
    for n in range(n_clients):
        data = part.client_data(ds, n) if part else ds
        opts = dict(lr_candidates=[1e-4, 1e-3, 1e-2], batch_size=16)
        opts.update(kw)
        clients.append(ClientState(n, datahub.make_shards(data, SeedPath(seed, (9, n))), **opts))
    return clients


def fresh_global(mode=BAYESIAN, sizes=(6, 8, 4), seed=1):
    return GlobalModel(bnn.init_net(list(sizes), derive_rng(SeedPath(seed, (1,))), 0.05, mode), 0)


def random_nets(k, sizes=(3, 4, 2), seed=0):
    out = []
    for i in range(k):
        r = derive_rng(SeedPath(seed, (i,)))
        net = bnn.init_net(list(sizes), r)
        net.mu[:] = r.normal(net.n_params)
        net.rho[:] = r.normal(net.n_params)
        out.append(net)
    return out


# --- schedules -----------------------------------------------------------------

def test_schedule_examples():
    assert lr_schedule("inv_sqrt_K", 1.0, 37, 100) == pytest.approx(0.1, abs=1e-15)
    assert lr_schedule("inv_k", 0.5, 5, 10) == pytest.approx(0.1, abs=1e-15)
    assert lr_schedule("inv_sqrt_k", 1.0, 4, 10) == 0.5
    assert lr_schedule("const", 0.3, 2, 4) == 0.3


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 10), st.integers(1, 10_000), st.data())
def test_schedule_closed_forms(a, K, data):
    k = data.draw(st.integers(1, K))
    assert lr_schedule("inv_sqrt_K", a, k, K) == a / math.sqrt(K)
    assert lr_schedule("inv_k", a, k, K) == a / k
    assert lr_schedule("inv_sqrt_k", a, k, K) == a / math.sqrt(k)


def test_schedule_errors():
    for k, K in ((0, 5), (1, 0), (6, 5)):
        with pytest.raises(ValueError):
            lr_schedule("inv_k", 1.0, k, K)
    with pytest.raises(ValueError):
        lr_schedule("cosine", 1.0, 1, 2)


def test_schedule_candidates_dedupe_first_round():
    assert fedcore.schedule_candidates(0.1, 1, 1) == [0.1]
    assert len(fedcore.schedule_candidates(0.1, 4, 16)) == 2  # a/sqrt(K) == a/k == 0.025
    assert len(fedcore.schedule_candidates(0.1, 3, 16)) == 3


# --- selection -----------------------------------------------------------------

def test_select_best_argmin_and_ties():
    assert select_best([0.9, 0.5, 0.7], [1, 2, 3]).best_index == 1
    assert select_best([0.5, 0.5, 0.7], [1, 2, 3]).best_index == 0
    sel = select_best([float("nan"), 0.7, float("inf")], [1, 2, 3])
    assert sel.best_index == 1 and sel.losses[0] == math.inf


def test_select_best_all_divergent():
    with pytest.raises(DivergenceError):
        select_best([math.inf, float("nan")], [1, 2])


def test_meta_seam_picks_argmin():
    c = blob_clients(1)[0]
    sel = meta_select_lr(c, fresh_global(), Prior(), SeedPath(0), temp_loss=lambda i, lr: [0.9, 0.5, 0.7][i])
    assert sel.best_index == 1 and sel.best_lr == 1e-3 and sel.losses == [0.9, 0.5, 0.7]


def test_meta_single_candidate():
    c = blob_clients(1, lr_candidates=[0.05])[0]
    sel = meta_select_lr(c, fresh_global(), Prior(), SeedPath(0), temp_loss=lambda i, lr: 123.0)
    assert sel.best_index == 0


def test_meta_randomized_argmin_trials():
    c = blob_clients(1)[0]
    r = np.random.default_rng(5)
    for _ in range(100):
        vals = r.uniform(size=3)
        sel = meta_select_lr(c, fresh_global(), Prior(), SeedPath(0), temp_loss=lambda i, lr: vals[i])
        assert sel.best_index == int(np.argmin(vals))


def test_meta_real_run_isolated_and_repeatable():
    c = blob_clients(1)[0]
    g = fresh_global()
    before = g.net.flat().tobytes()
    a = meta_select_lr(c, g, Prior(), SeedPath(3, (0, 0, 0)))
    b = meta_select_lr(c, g, Prior(), SeedPath(3, (0, 0, 0)))
    assert g.net.flat().tobytes() == before
    assert a == b and len(a.losses) == 3 and all(map(math.isfinite, a.losses))
    assert a.best_index == int(np.argmin(a.losses))


def test_meta_divergent_candidate_is_excluded():
    c = blob_clients(1, lr_candidates=[1e-3, 1e200])[0]
    sel = meta_select_lr(c, fresh_global(), Prior(), SeedPath(4))
    assert sel.losses[1] == math.inf and sel.best_index == 0


def _convex_task():
    # 1-D logistic regression: deterministic [1, 2] net is convex in its weights
    r = np.random.default_rng(11)
    x = np.concatenate([r.normal(-1, 0.7, 60), r.normal(1, 0.7, 60)])
    y = np.repeat([0, 1], 60)
    ds = Dataset((x[:, None] + 3) / 6, y, 2)
    return ds


def _brute_force_meta_loss(g: GlobalModel, c: ClientState, lr: float, seed: SeedPath) -> float:
    # independent re-execution: plain loop over the same batch order, then softmax CE on the meta shard
    W = g.net.mu.copy()
    X, y = c.shards.train.X, c.shards.train.y
    for e in range(c.t_temp):
        perm = derive_rng(seed.child(fedcore.META_ORDER, e)).permutation(len(X))
        for s in range(0, len(X), c.batch_size):
            idx = perm[s:s + c.batch_size]
            w = W[:2].reshape(2, 1)
            z = X[idx] @ w.T + W[2:]
            p = np.exp(z - z.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            p[np.arange(len(idx)), y[idx]] -= 1.0  # d(sum CE)/dz
            W[:2] -= lr * (p.T @ X[idx]).ravel()
            W[2:] -= lr * p.sum(0)
    z = c.shards.meta.X @ W[:2].reshape(2, 1).T + W[2:]
    logp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
    return float(-np.mean(logp[np.arange(len(z)), c.shards.meta.y]))


@pytest.mark.parametrize("cands", [[0.01, 0.1, 1.0], [0.5, 0.05, 5.0], [1e-3, 2.0, 0.3]])
def test_meta_matches_brute_force_oracle(cands):
    ds = _convex_task()
    c = ClientState(0, datahub.make_shards(ds, 1), cands, t_temp=2, batch_size=8, nll_reduction="sum")
    g = GlobalModel(VariationalNet(mode=DETERMINISTIC, sizes=[1, 2], mu=[0.3, -0.2, 0.0, 0.1], rho=np.zeros(4)))
    seed = SeedPath(7, (0, 0, 0))
    sel = meta_select_lr(c, g, Prior(), seed)
    oracle = [_brute_force_meta_loss(g, c, lr, seed) for lr in cands]
    np.testing.assert_allclose(sel.losses, oracle, rtol=1e-10)
    assert sel.best_index == int(np.argmin(oracle))


# --- local training ------------------------------------------------------------

def test_local_train_tiny_lr_stays_put():
    c = blob_clients(1)[0]
    g = fresh_global()
    net, _ = local_train(c, g, 1e-12, Prior(), SeedPath(0))
    assert np.max(np.abs(net.flat() - g.net.flat())) <= 1e-9


def test_local_train_epoch_prefix():
    c = blob_clients(1)[0]
    g = fresh_global()
    seed = SeedPath(2)
    one = g.net.copy()
    fedcore.train_epochs(one, c.shards.train, 0.01, Prior(), c, seed, 1, fedcore.TRAIN_ORDER, fedcore.TRAIN_NOISE)
    two = g.net.copy()
    fedcore.train_epochs(two, c.shards.train, 0.01, Prior(), c, seed, 2, fedcore.TRAIN_ORDER, fedcore.TRAIN_NOISE)
    assert one.flat().tobytes() != two.flat().tobytes()
    fedcore.train_epochs(one, c.shards.train, 0.01, Prior(), c, seed, 1, fedcore.TRAIN_ORDER, fedcore.TRAIN_NOISE,
                         first_epoch=1)
    assert one.flat().tobytes() == two.flat().tobytes()


def test_local_train_improves_meta_loss():
    c = blob_clients(1, per_class=80, local_epochs=5)[0]
    g = fresh_global()
    before = evaluate(g.net, c.shards.meta, 10, derive_rng(SeedPath(0, (5,))))[1]
    lr = meta_select_lr(c, g, Prior(), SeedPath(1)).best_lr
    net, _ = local_train(c, g, lr, Prior(), SeedPath(1))
    after = evaluate(net, c.shards.meta, 10, derive_rng(SeedPath(0, (5,))))[1]
    assert after <= before


def test_local_train_divergence_identifies_client_and_epoch():
    c = blob_clients(2)[1]
    with pytest.raises(DivergenceError) as info:
        local_train(c, fresh_global(), 1e200, Prior(), SeedPath(0))
    assert info.value.client == 1 and info.value.epoch == 0
    assert "client=1" in str(info.value)


def test_local_train_does_not_touch_global():
    c = blob_clients(1)[0]
    g = fresh_global()
    before = g.net.flat().tobytes()
    local_train(c, g, 0.01, Prior(), SeedPath(0))
    assert g.net.flat().tobytes() == before


def test_kl_weight_policies():
    c = blob_clients(1, batch_size=7)[0]
    n = len(c.shards.train)
    assert c.kl_weight() == 1 / math.ceil(n / 7)
    c.kl_scale = "per_sample"
    assert c.kl_weight() == 1 / n
    c.kl_scale = 0.25
    assert c.kl_weight() == 0.25


def test_client_state_validation():
    sh = blob_clients(1)[0].shards
    for bad in ([], [0.1, 0.1], [0.1, -1.0]):
        with pytest.raises(ValueError):
            ClientState(0, sh, bad)
    with pytest.raises(ValueError):
        ClientState(0, sh, [0.1], t_temp=0)
    with pytest.raises(ValueError):
        ClientState(0, sh, [0.1], local_epochs=0)


# --- aggregation ---------------------------------------------------------------

def naive_mean(nets):
    # independent elementwise loop in ascending client order
    mu = np.empty(nets[0].n_params)
    rho = np.empty(nets[0].n_params)
    for j in range(nets[0].n_params):
        s_mu = 0.0
        s_rho = 0.0
        for net in nets:
            s_mu += float(net.mu[j])
            s_rho += float(net.rho[j])
        mu[j] = s_mu / len(nets)
        rho[j] = s_rho / len(nets)
    return mu, rho


def test_aggregate_matches_naive_mean_bitwise():
    nets = random_nets(5)
    out = aggregate(nets)
    mu, rho = naive_mean(nets)
    assert out.mu.tobytes() == mu.tobytes() and out.rho.tobytes() == rho.tobytes()


def test_aggregate_idempotent_and_identity():
    net = random_nets(1)[0]
    assert aggregate([net.copy() for _ in range(4)]).flat().tobytes() == net.flat().tobytes()
    assert aggregate([net]).flat().tobytes() == net.flat().tobytes()


def test_aggregate_two_values():
    a = VariationalNet(mode=BAYESIAN, sizes=[1, 1], mu=[1.0, 0.0], rho=[0.0, 0.0])
    b = VariationalNet(mode=BAYESIAN, sizes=[1, 1], mu=[3.0, 0.0], rho=[0.0, 0.0])
    assert aggregate([a, b]).mu[0] == 2.0


@pytest.mark.parametrize("alpha", [0.25, 0.5, 2.0, 8.0, -4.0])
def test_aggregate_linear_in_scale(alpha):
    nets = random_nets(5)
    scaled = [n.with_flat(alpha * n.flat()) for n in nets]
    assert aggregate(scaled).flat().tobytes() == (alpha * aggregate(nets).flat()).tobytes()


def test_aggregate_permutation_invariant_up_to_rounding():
    nets = random_nets(5)
    np.testing.assert_allclose(aggregate(nets[::-1]).flat(), aggregate(nets).flat(), rtol=1e-15, atol=1e-15)


def test_aggregate_size_weighted():
    a = VariationalNet(mode=BAYESIAN, sizes=[1, 1], mu=[1.0, 0.0], rho=[0.0, 0.0])
    b = VariationalNet(mode=BAYESIAN, sizes=[1, 1], mu=[4.0, 0.0], rho=[0.0, 0.0])
    assert aggregate([a, b], "by_train_size", [2, 1]).mu[0] == pytest.approx(2.0)


def test_aggregate_errors_name_client():
    nets = random_nets(2) + random_nets(1, sizes=(3, 5, 2))
    with pytest.raises(AggregationError, match="client 2"):
        aggregate(nets)
    with pytest.raises(AggregationError):
        aggregate([])


# --- rounds --------------------------------------------------------------------

def test_round_single_client_equals_local_train():
    c = blob_clients(1)[0]
    g = fresh_global(DETERMINISTIC)
    seed = SeedPath(5)
    new, rep = run_round(g, [c], Prior(), RoundMode("fedavg_det", 0.01), seed)
    local, _ = local_train(c, g, 0.01, Prior(), client_seed(seed, 0, 0))
    assert new.net.flat().tobytes() == local.flat().tobytes()
    assert new.round == 1 and len(rep.clients) == 1


def test_fedavg_round_turns_bayesian_start_deterministic():
    c = blob_clients(1)[0]
    new, _ = run_round(fresh_global(BAYESIAN), [c], Prior(), RoundMode("fedavg_det", 0.01), SeedPath(5))
    assert new.net.mode == DETERMINISTIC


def _two_rounds(workers, mode=RoundMode("meta_bayfl")):
    clients = blob_clients(5, per_class=60)
    g = fresh_global()
    reports = []
    for _ in range(2):
        g, rep = run_round(g, clients, Prior(), mode, SeedPath(9), workers=workers)
        reports.append(rep)
    return g, reports


def test_round_determinism():
    g1, r1 = _two_rounds(1)
    g2, r2 = _two_rounds(1)
    assert g1.net.flat().tobytes() == g2.net.flat().tobytes()
    assert r1 == r2


def test_sequential_and_parallel_identical():
    g1, r1 = _two_rounds(1)
    g5, r5 = _two_rounds(5)
    assert g1.net.flat().tobytes() == g5.net.flat().tobytes()
    assert r1 == r5


def test_round_report_contents():
    _, reps = _two_rounds(1)
    rep = reps[0]
    assert [c.id for c in rep.clients] == [0, 1, 2, 3, 4]
    for c in rep.clients:
        assert c.selected_lr in (1e-4, 1e-3, 1e-2) and len(c.meta_losses) == 3
        assert 0 <= c.test_accuracy <= 1 and math.isfinite(c.test_loss)
    assert reps[1].round == 1 and rep.mode == "meta_bayfl"


def test_round_divergence_aborts_with_client():
    clients = blob_clients(3)
    with pytest.raises(DivergenceError) as info:
        run_round(fresh_global(), clients, Prior(), RoundMode("bayfl_fixed", 1e200), SeedPath(0))
    assert info.value.client == 0 and info.value.round == 0
    assert info.value.mode == "bayfl_fixed@1e+200"


def test_round_rejects_empty():
    with pytest.raises(ValueError):
        run_round(fresh_global(), [], Prior(), RoundMode("meta_bayfl"), SeedPath(0))


def test_mode_validation():
    with pytest.raises(ValueError):
        RoundMode("bayfl_fixed")
    with pytest.raises(ValueError):
        RoundMode("sgd", 0.1)
    assert RoundMode("bayfl_fixed", 0.01).label == "bayfl_fixed@0.01"


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("FEDBAYES_THREADS", "3")
    assert fedcore.worker_count() == 3
    monkeypatch.setenv("FEDBAYES_THREADS", "0")
    assert fedcore.worker_count() == (os.cpu_count() or 1)
    assert fedcore.worker_count(2) == 2


# --- evaluation ----------------------------------------------------------------

def test_evaluate_ties_go_to_first_class():
    net = VariationalNet(mode=DETERMINISTIC, sizes=[2, 3], mu=np.zeros(9), rho=np.zeros(9))
    ds = Dataset(np.zeros((3, 2)), [0, 1, 2], 3)
    acc, loss = evaluate(net, ds, 1, None)
    assert acc == pytest.approx(1 / 3)
    assert loss == pytest.approx(math.log(3), abs=1e-15)
