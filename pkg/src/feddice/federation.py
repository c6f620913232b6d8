"""Centralized baselines, FedAvg rounds and the cross-client evaluation protocol."""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _accel
from .errors import ArchError, EmptyInput, MetricsUnavailable
from .metrics import MetricsReport, evaluate
from .models import Arch, InputStats, ParamVector, TrainConfig, from_params, train
from .netflow import Dataset

logger = logging.getLogger(__name__)


def fedavg(client_params: Sequence[ParamVector], weights: Sequence[int]) -> ParamVector:
    """Sample-count weighted mean of client parameters.

    Terms are summed in list order (client id order), starting from the first
    term rather than from zero, so one client comes back bitwise unchanged.
    """
    if len(client_params) == 0:
        raise EmptyInput("fedavg needs at least one client")
    if len(weights) != len(client_params):
        raise ValueError("one weight per client is required")
    arch_id = client_params[0].arch_id
    size = client_params[0].values.shape
    for pv in client_params:
        if pv.arch_id != arch_id or pv.values.shape != size:
            raise ArchError("client parameter vectors have different architectures")
    if any(w <= 0 for w in weights):
        raise ValueError("client weights must be > 0")
    total = sum(weights)
    coeffs = np.array([w / total for w in weights], dtype=np.float64)
    mat = np.stack([pv.values for pv in client_params])
    return ParamVector(_accel.weighted_sum(coeffs, mat), arch_id)


@dataclass
class FLConfig:
    num_clients: int
    rounds: int = 10
    local_epochs: int = 1
    model_kind: str = "lr"
    train: TrainConfig = field(default_factory=TrainConfig)
    # overrides train.seed when given
    seed: int | None = None
    workers: int = 1
    model_kw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.seed is not None:
            self.train = dataclasses.replace(self.train, seed=self.seed)
        self.seed = self.train.seed


@dataclass
class RoundLog:
    round: int
    client_counts: list
    metrics: MetricsReport | None
    train_seconds: float
    aggregate_seconds: float
    evaluate_seconds: float

    @property
    def n(self) -> int:
        return sum(self.client_counts)


def run_centralized(datasets, model_kind: str, train_config: TrainConfig, model_kw=None):
    """Train on the pooled training split and evaluate on the test split.

    ``datasets`` is ``(train, val, test)``. Returns ``(model, metrics,
    timing)`` with ``timing = {"train_seconds", "test_seconds"}``.
    """
    tr, _val, te = datasets
    if te is None or len(te) == 0:
        raise MetricsUnavailable("test split is empty")
    model = Arch(model_kind, tr.feature_dim, **(model_kw or {})).build(train_config.seed)
    t0 = time.perf_counter()
    model.fit_input_stats(InputStats.from_inputs(tr.inputs()))
    train(model, tr, train_config)
    t1 = time.perf_counter()
    metrics = evaluate(model, te)
    t2 = time.perf_counter()
    logger.info("centralized %s: acc=%.6f fnr=%.6f (%.2fs train)",
                model_kind, metrics.accuracy, metrics.fnr, t1 - t0)
    return model, metrics, {"train_seconds": t1 - t0, "test_seconds": t2 - t1}


def _client_update(arch, global_params, data, cfg: FLConfig, client_id: int, rnd: int):
    model = from_params(arch, global_params)
    local = dataclasses.replace(cfg.train, epochs=cfg.local_epochs)
    train(model, data, local, epoch_offset=rnd * cfg.local_epochs, stream=client_id)
    return model.to_params()


def run_federated(config: FLConfig, client_datasets: Sequence[Dataset], test: Dataset | None,
                  initial: ParamVector | None = None, round_offset: int = 0):
    """Broadcast, local training, FedAvg, global evaluation; once per round.

    Before round 0 the global input standardiser is fitted from per-client
    feature moments (count, mean, M2), never from raw samples.

    Client ``i`` shuffles with stream ``i`` and epoch index ``round *
    local_epochs + e``, so a single-client federation replays centralized
    training exactly. ``initial`` and ``round_offset`` resume a federation
    from an earlier global model. Returns ``(global_model, round_logs)``.
    """
    if len(client_datasets) != config.num_clients:
        raise ValueError(f"expected {config.num_clients} client datasets, "
                         f"got {len(client_datasets)}")
    dims = {ds.feature_dim for ds in client_datasets}
    if len(dims) != 1:
        raise ValueError(f"clients disagree on feature_dim: {sorted(dims)}")
    if any(len(ds) == 0 for ds in client_datasets):
        raise ValueError("every client needs training data")
    arch = Arch(config.model_kind, dims.pop(), **config.model_kw)
    if initial is not None:
        global_params = from_params(arch, initial).to_params()
    else:
        global_model = arch.build(config.train.seed)
        # clients share only per-feature moments, merged in client order
        global_model.fit_input_stats(
            InputStats.combine(InputStats.from_inputs(ds.inputs()) for ds in client_datasets))
        global_params = global_model.to_params()
    counts = [len(ds) for ds in client_datasets]
    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for rnd in range(round_offset, round_offset + config.rounds):
            t0 = time.perf_counter()
            jobs = [(arch, global_params, ds, config, i, rnd)
                    for i, ds in enumerate(client_datasets)]
            if pool is not None:
                updates = list(pool.map(lambda a: _client_update(*a), jobs))
            else:
                updates = [_client_update(*a) for a in jobs]
            t1 = time.perf_counter()
            global_params = fedavg(updates, counts)
            t2 = time.perf_counter()
            metrics = None
            if test is not None and len(test):
                metrics = evaluate(from_params(arch, global_params), test)
            t3 = time.perf_counter()
            logs.append(RoundLog(rnd, list(counts), metrics, t1 - t0, t2 - t1, t3 - t2))
            if metrics is not None:
                logger.info("round %d: acc=%.6f fnr=%.6f", rnd, metrics.accuracy, metrics.fnr)
    finally:
        if pool is not None:
            pool.shutdown()
    return from_params(arch, global_params), logs


@dataclass
class CrossRow:
    train_client: str
    eval_set: str
    metrics: MetricsReport


def cross_evaluate(client_datasets: Sequence[Dataset], test: Dataset, model_kind: str,
                   train_config: TrainConfig | None = None, names=None, model_kw=None):
    """Train on one client at a time; evaluate on every other client and on ``test``."""
    if len(client_datasets) < 2:
        raise ValueError("cross evaluation needs at least two clients")
    cfg = train_config or TrainConfig()
    names = list(names or [f"Client{i + 1}" for i in range(len(client_datasets))])
    rows = []
    for i, ds in enumerate(client_datasets):
        model = Arch(model_kind, ds.feature_dim, **(model_kw or {})).build(cfg.seed)
        model.fit_input_stats(InputStats.from_inputs(ds.inputs()))
        train(model, ds, cfg)
        for j, other in enumerate(client_datasets):
            if j != i:
                rows.append(CrossRow(names[i], names[j], evaluate(model, other)))
        rows.append(CrossRow(names[i], "Test dataset", evaluate(model, test)))
    return rows


def compare_overhead(train_set: Dataset, client_datasets: Sequence[Dataset], test: Dataset,
                     model_kind: str, train_config: TrainConfig, rounds: int = 10,
                     model_kw=None) -> dict:
    """Wall-clock of centralized vs federated training+testing and their ratio.

    Centralized runs ``rounds`` epochs so both sides see the same number of
    passes over the data.
    """
    cfg = dataclasses.replace(train_config, epochs=rounds)
    _, c_metrics, timing = run_centralized((train_set, None, test), model_kind, cfg, model_kw)
    central = timing["train_seconds"] + timing["test_seconds"]
    t0 = time.perf_counter()
    fl_cfg = FLConfig(len(client_datasets), rounds, 1, model_kind, train_config,
                      model_kw=dict(model_kw or {}))
    _, logs = run_federated(fl_cfg, client_datasets, test)
    federated = time.perf_counter() - t0
    return {
        "model": model_kind,
        "centralized_seconds": central,
        "federated_seconds": federated,
        "ratio": federated / central if central > 0 else float("inf"),
        "centralized_accuracy": c_metrics.accuracy,
        "federated_accuracy": logs[-1].metrics.accuracy if logs[-1].metrics else float("nan"),
    }
