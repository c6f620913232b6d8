import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from feddice.errors import ArchError, EmptyInput, MetricsUnavailable
from feddice.federation import (
    FLConfig, compare_overhead, cross_evaluate, fedavg, run_centralized, run_federated,
)
from feddice.models import ParamVector, TrainConfig
from feddice.netflow import Scenario, partition

SMALL_FNN = {"hidden": (8, 4)}


def pv(values, arch="a"):
    return ParamVector(np.asarray(values, dtype=np.float64), arch)


def loop_fedavg(params, weights):
    total = sum(weights)
    out = [0.0] * len(params[0])
    for p, w in zip(params, weights):
        for j, v in enumerate(p):
            out[j] += w / total * v
    return np.array(out)


def test_fedavg_worked_example():
    out = fedavg([pv([1, 3]), pv([5, 7])], [1, 3])
    assert np.allclose(out.values, [4.0, 6.0], rtol=0, atol=1e-12)
    assert out.arch_id == "a"


def test_fedavg_single_client_bitwise():
    v = np.random.default_rng(0).normal(size=50) * 1e3
    out = fedavg([pv(v)], [17])
    assert np.array_equal(out.values, v)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 10**6))
def test_fedavg_matches_loop(m, d, seed):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=d) for _ in range(m)]
    weights = [int(w) for w in rng.integers(1, 1000, size=m)]
    out = fedavg([pv(p) for p in params], weights)
    assert np.allclose(out.values, loop_fedavg(params, weights), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10**6))
def test_fedavg_of_identical_clients_is_identity(m, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=8)
    weights = [int(w) for w in rng.integers(1, 100, size=m)]
    out = fedavg([pv(v) for _ in range(m)], weights)
    assert np.allclose(out.values, v, rtol=1e-14, atol=1e-15)


def test_fedavg_errors():
    with pytest.raises(EmptyInput):
        fedavg([], [])
    with pytest.raises(ArchError):
        fedavg([pv([1, 2]), pv([1, 2], "b")], [1, 1])
    with pytest.raises(ArchError):
        fedavg([pv([1, 2]), pv([1, 2, 3])], [1, 1])
    with pytest.raises(ValueError):
        fedavg([pv([1, 2]), pv([1, 2])], [1, 0])
    with pytest.raises(ValueError):
        fedavg([pv([1, 2])], [1, 2])


@pytest.mark.parametrize("kind", ["lr", "svm", "fnn"])
def test_single_client_equals_centralized(kind):
    train = make_dataset(np.tile([0, 1, 1, 4], 20), dim=6, seed=1)
    test = make_dataset(np.tile([0, 1], 10), dim=6, seed=2)
    kw = SMALL_FNN if kind == "fnn" else {}
    cfg = TrainConfig(learning_rate=0.05, epochs=3, batch_size=8, seed=5)
    central, _, _ = run_centralized((train, None, test), kind, cfg, kw)
    fl = FLConfig(1, rounds=3, local_epochs=1, model_kind=kind, train=cfg, model_kw=kw)
    model, logs = run_federated(fl, [train], test)
    assert np.array_equal(model.flat, central.flat)
    assert len(logs) == 3 and logs[-1].metrics is not None


def test_federated_is_deterministic():
    clients = [make_dataset(np.tile([0, 1], 10), dim=5, seed=s) for s in (1, 2, 3)]
    cfg = FLConfig(3, rounds=2, model_kind="fnn", model_kw=SMALL_FNN,
                   train=TrainConfig(batch_size=4, seed=9))
    a, _ = run_federated(cfg, clients, None)
    b, _ = run_federated(cfg, clients, None)
    threaded = FLConfig(3, rounds=2, model_kind="fnn", model_kw=SMALL_FNN,
                        train=TrainConfig(batch_size=4, seed=9), workers=3)
    c, _ = run_federated(threaded, clients, None)
    assert np.array_equal(a.flat, b.flat)
    assert np.array_equal(a.flat, c.flat)


def test_resume_equals_uninterrupted():
    clients = [make_dataset(np.tile([0, 1], 8), dim=4, seed=s) for s in (4, 5)]
    train = TrainConfig(batch_size=4, seed=2)
    full, logs = run_federated(FLConfig(2, rounds=4, train=train), clients, None)
    first, _ = run_federated(FLConfig(2, rounds=2, train=train), clients, None)
    second, logs2 = run_federated(FLConfig(2, rounds=2, train=train), clients, None,
                                  initial=first.to_params(), round_offset=2)
    assert np.array_equal(full.flat, second.flat)
    assert [r.round for r in logs2] == [2, 3]


def test_round_logs_and_errors():
    clients = [make_dataset([0, 1, 1], seed=s) for s in (1, 2)]
    _, logs = run_federated(FLConfig(2, rounds=2), clients, None)
    assert all(r.metrics is None and r.n == 6 for r in logs)
    with pytest.raises(ValueError):
        run_federated(FLConfig(3), clients, None)
    with pytest.raises(ValueError):
        run_federated(FLConfig(2), [clients[0], make_dataset([0, 1], dim=3)], None)
    with pytest.raises(ValueError):
        FLConfig(0)
    with pytest.raises(MetricsUnavailable):
        run_centralized((clients[0], None, None), "lr", TrainConfig())


def test_seed_override():
    cfg = FLConfig(2, seed=11)
    assert cfg.train.seed == 11 and cfg.seed == 11


def test_cross_evaluate_layout(splits_small):
    train, _, test = splits_small
    clients = partition(train, Scenario.NONIID_4, seed=0)
    rows = cross_evaluate(clients, test, "lr", TrainConfig(epochs=1))
    assert len(rows) == 16
    assert [r.eval_set for r in rows[:4]] == ["Client2", "Client3", "Client4", "Test dataset"]
    assert {r.train_client for r in rows} == {"Client1", "Client2", "Client3", "Client4"}
    with pytest.raises(ValueError):
        cross_evaluate(clients[:1], test, "lr")


def test_compare_overhead_reports_ratio():
    clients = [make_dataset(np.tile([0, 1], 10), seed=s) for s in (1, 2)]
    train = make_dataset(np.tile([0, 1], 20), seed=3)
    out = compare_overhead(train, clients, clients[0], "lr", TrainConfig(), rounds=2)
    assert out["ratio"] > 0 and np.isfinite(out["ratio"])
