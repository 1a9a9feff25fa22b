import math

import numpy as np
import pytest

from fedvem import rng as rng_mod
from fedvem.baselines import (BaselineConfig, fedavg_round, fedprox_round,
                              local_train, proximal_grads, run_baseline)
from fedvem.data import PartitionSpec, SynthSpec, make_partition, synth_pair
from fedvem.federation import select_reporters
from fedvem.nn import InputError, MlpParams, init_mlp

from helpers import central_diff, flatten_params, rel_err, unflatten_params


def tiny_problem(clients=3, seed=0):
    spec = SynthSpec(classes=3, subclasses_per_class=2, dim=6,
                     points_per_subclass=20, test_points_per_subclass=5,
                     seed=seed)
    train, test = synth_pair(spec)
    part = make_partition(train, PartitionSpec(
        scenario="label_skew", clients=clients, labels_per_client=2, seed=seed))
    return train, test, part


def toy_clients(n_clients=3, n=12, dim=4, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.standard_normal((n, dim)), rng.integers(0, classes, size=n))
            for _ in range(n_clients)]


# ---------------------------------------------------------- proximal_grads

def test_proximal_grads_zero_at_anchor():
    params = init_mlp(3, (4,), 2, np.random.default_rng(0))
    g = proximal_grads(params, params.copy(), mu_prox=2.0)
    assert np.all(g.head[0] == 0.0)
    assert np.all(g.base[0][0] == 0.0)


def test_proximal_grads_linear_in_displacement():
    params = init_mlp(3, (4,), 2, np.random.default_rng(1))
    anchor = init_mlp(3, (4,), 2, np.random.default_rng(2))
    g = proximal_grads(params, anchor, mu_prox=0.5)
    np.testing.assert_allclose(g.head[0],
                               0.5 * (params.head[0] - anchor.head[0]))
    np.testing.assert_allclose(g.base[0][1],
                               0.5 * (params.base[0][1] - anchor.base[0][1]))


def test_proximal_grads_match_finite_differences():
    params = init_mlp(3, (3,), 2, np.random.default_rng(3))
    anchor = init_mlp(3, (3,), 2, np.random.default_rng(4))
    mu = 1.7
    analytic = flatten_params(proximal_grads(params, anchor, mu))
    a_vec = flatten_params(anchor)

    def penalty(vec):
        return mu / 2 * float(((vec - a_vec) ** 2).sum())

    numeric = central_diff(penalty, flatten_params(params))
    assert rel_err(analytic, numeric) <= 1e-6


# -------------------------------------------------------------- local_train

def test_local_train_zero_lr_is_identity():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    x, y = toy_clients(1)[0]
    cfg = BaselineConfig(scheme="local", lr=0.0, epochs=3, batch=4)
    out = local_train(x, y, params, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.head[0], params.head[0])


def test_local_train_does_not_mutate_input():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    before = params.head[0].copy()
    x, y = toy_clients(1)[0]
    cfg = BaselineConfig(scheme="local", lr=0.1, epochs=2, batch=4)
    local_train(x, y, params, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(params.head[0], before)


def test_local_train_rejects_empty_client():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    cfg = BaselineConfig(scheme="local")
    with pytest.raises(InputError):
        local_train(np.zeros((0, 4)), np.zeros(0, dtype=int), params, cfg,
                    np.random.default_rng(0))


# ------------------------------------------------------------ fedavg rounds

def test_fedavg_round_no_reporters_returns_broadcast():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    cfg = BaselineConfig(s=1e-12, seed=0)
    out = fedavg_round(params, toy_clients(), cfg, t=0)
    assert out is params


def test_fedavg_round_single_client_equals_local_sgd():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    clients = toy_clients(1)
    cfg = BaselineConfig(s=1.0, lr=0.05, epochs=2, batch=4, seed=3)
    out = fedavg_round(params, clients, cfg, t=0)
    rng = rng_mod.stream(cfg.seed, rng_mod.TAG_CLIENT, 0, 0)
    x, y = clients[0]
    expected = local_train(x, y, params,
                           BaselineConfig(scheme="local", lr=0.05, epochs=2,
                                          batch=4), rng)
    np.testing.assert_allclose(out.head[0], expected.head[0], atol=1e-15)


def test_fedprox_zero_mu_equals_fedavg():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    clients = toy_clients()
    avg = fedavg_round(params, clients, BaselineConfig(s=1.0, seed=1, epochs=1),
                       t=0)
    prox = fedprox_round(params, clients,
                         BaselineConfig(scheme="fedprox", s=1.0, seed=1,
                                        epochs=1, mu_prox=0.0), t=0)
    np.testing.assert_allclose(prox.head[0], avg.head[0], atol=1e-15)


def test_fedprox_large_mu_pins_models_to_broadcast():
    params = init_mlp(4, (3,), 2, np.random.default_rng(0))
    clients = toy_clients()
    prox = fedprox_round(params, clients,
                         BaselineConfig(scheme="fedprox", s=1.0, seed=1,
                                        epochs=3, lr=0.01, mu_prox=50.0), t=0)
    avg = fedavg_round(params, clients,
                       BaselineConfig(s=1.0, seed=1, epochs=3, lr=0.01), t=0)
    drift_prox = float(np.abs(prox.head[0] - params.head[0]).max())
    drift_avg = float(np.abs(avg.head[0] - params.head[0]).max())
    assert drift_prox < drift_avg


def test_reporter_draws_match_federated_stream():
    cfg = BaselineConfig(s=0.3, seed=9)
    for t in range(5):
        ours = select_reporters(10, cfg.s,
                                rng_mod.stream(cfg.seed, rng_mod.TAG_REPORTERS, t))
        again = select_reporters(10, cfg.s,
                                 rng_mod.stream(cfg.seed, rng_mod.TAG_REPORTERS, t))
        assert ours.tolist() == again.tolist()


# ------------------------------------------------------------ run_baseline

def test_run_baseline_local_single_report():
    train, test, part = tiny_problem()
    cfg = BaselineConfig(scheme="local", lr=0.1, epochs=40, batch=16,
                         hidden=(5,), seed=0)
    reports = run_baseline(cfg, train, test, part)
    assert len(reports) == 1
    assert math.isnan(reports[0].gm_accuracy)
    assert reports[0].mean_pm() > 0.5


def test_run_baseline_fedavg_improves():
    train, test, part = tiny_problem()
    cfg = BaselineConfig(scheme="fedavg", lr=0.05, epochs=3, batch=16, T=15,
                         s=1.0, hidden=(5,), seed=0)
    reports = run_baseline(cfg, train, test, part)
    assert len(reports) == 15
    assert reports[-1].gm_accuracy > reports[0].gm_accuracy
    assert reports[-1].gm_accuracy > 0.5


def test_run_baseline_is_deterministic():
    train, test, part = tiny_problem()
    cfg = BaselineConfig(scheme="fedavg", lr=0.05, epochs=2, batch=16, T=3,
                         s=0.5, hidden=(5,), seed=4)
    r1 = run_baseline(cfg, train, test, part)
    r2 = run_baseline(cfg, train, test, part)
    assert [r.to_record() for r in r1] == [r.to_record() for r in r2]


def test_run_baseline_rejects_bad_config():
    train, test, part = tiny_problem()
    with pytest.raises(InputError, match="BaselineConfig.scheme"):
        run_baseline(BaselineConfig(scheme="sgd"), train, test, part)
