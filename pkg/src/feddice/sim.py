"""Tick-based simulation of hospitals joined by a supernode under a ransomware outbreak.

Each tick runs, in order: flow emission by every non-quarantined device,
per-edge Bernoulli spread from a snapshot of the infected set, window
aggregation by each hospital's PbSA agent, an FL round when one is due
(the new global model is compiled into a QUARANTINE_SOURCE policy and pushed
to every local controller), and evaluation of each window against its
controller's policies with the enforcer acting on matches.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol as TypingProtocol, Sequence

import numpy as np

from . import _accel
from .errors import UnknownDevice
from .federation import FLConfig, run_federated
from .netflow import (
    Family, FlowRecord, Protocol, WindowConfig, aggregate_window, parse_family,
)
from .policy import (
    ActionKind, FlowContext, ModelRegistry, PolicyRepository, QUARANTINE_SOURCE,
    compile_policy, evaluate,
)
from .synth import window_flows


class InfectionState(enum.IntEnum):
    CLEAN = 0
    INFECTED = 1
    QUARANTINED = 2


# ------------------------------------------------------------------ topology

@dataclass(frozen=True)
class Hospital:
    id: str
    controller: str
    switch: str


@dataclass(frozen=True)
class Device:
    id: str
    hospital: str
    ip: str


@dataclass
class Topology:
    """Hospitals behind one supernode; ``links`` are undirected device pairs.

    Links between devices of different hospitals are carried by the
    supernode. Each hospital's devices must be connected by its own links.
    """

    supernode: str
    hospitals: list[Hospital]
    devices: list[Device]
    links: list[tuple[str, str]]

    def __post_init__(self):
        self.hospitals = [h if isinstance(h, Hospital) else Hospital(**h) for h in self.hospitals]
        self.devices = [d if isinstance(d, Device) else Device(**d) for d in self.devices]
        self.links = [tuple(link) for link in self.links]
        hids = [h.id for h in self.hospitals]
        if len(set(hids)) != len(hids):
            raise ValueError("hospital ids must be unique")
        dids = [d.id for d in self.devices]
        if len(set(dids)) != len(dids):
            raise ValueError("device ids must be unique")
        ips = [d.ip for d in self.devices]
        if len(set(ips)) != len(ips):
            raise ValueError("device ips must be unique")
        self._index = {d: i for i, d in enumerate(dids)}
        for d in self.devices:
            if d.hospital not in hids:
                raise ValueError(f"device {d.id} names unknown hospital {d.hospital}")
        for a, b in self.links:
            if a not in self._index or b not in self._index:
                raise ValueError(f"link ({a}, {b}) references an unknown device")
            if a == b:
                raise ValueError(f"self-link on {a}")
        for h in self.hospitals:
            members = [d.id for d in self.devices if d.hospital == h.id]
            if not _connected(members, [(a, b) for a, b in self.links
                                        if a in members and b in members]):
                raise ValueError(f"devices of hospital {h.id} are not connected")

    def index(self, device_id: str) -> int:
        try:
            return self._index[device_id]
        except KeyError:
            raise UnknownDevice(f"no device {device_id!r}") from None

    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR arrays ``(indptr, indices)``, neighbours sorted by device index."""
        n = len(self.devices)
        nbrs = [set() for _ in range(n)]
        for a, b in self.links:
            i, j = self._index[a], self._index[b]
            nbrs[i].add(j)
            nbrs[j].add(i)
        indptr = np.zeros(n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(s) for s in nbrs])
        indices = np.array([j for s in nbrs for j in sorted(s)], dtype=np.int64)
        return indptr, indices

    def to_dict(self) -> dict:
        return {
            "supernode": self.supernode,
            "hospitals": [{"id": h.id, "controller": h.controller, "switch": h.switch}
                          for h in self.hospitals],
            "devices": [{"id": d.id, "hospital": d.hospital, "ip": d.ip} for d in self.devices],
            "links": [list(link) for link in self.links],
        }

    @classmethod
    def from_dict(cls, d) -> "Topology":
        return cls(d.get("supernode", "supernode"), d["hospitals"], d["devices"], d["links"])

    @classmethod
    def load(cls, path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _connected(members, links) -> bool:
    if len(members) <= 1:
        return True
    adj = {m: [] for m in members}
    for a, b in links:
        adj[a].append(b)
        adj[b].append(a)
    seen, stack = {members[0]}, [members[0]]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(members)


def default_topology(n_hospitals: int = 4, devices_per_hospital: int = 5) -> Topology:
    """Ring of devices inside each hospital; device 0 of consecutive hospitals linked."""
    if n_hospitals < 1 or devices_per_hospital < 1:
        raise ValueError("need at least one hospital and one device per hospital")
    hospitals, devices, links = [], [], []
    for h in range(n_hospitals):
        hid = f"H{h + 1}"
        hospitals.append(Hospital(hid, f"ctl-{hid}", f"sw-{hid}"))
        ids = [f"{hid}-D{k + 1}" for k in range(devices_per_hospital)]
        devices += [Device(d, hid, f"10.{100 + h}.0.{10 + k}") for k, d in enumerate(ids)]
        links += list(zip(ids[:-1], ids[1:]))
        if devices_per_hospital >= 3:
            links.append((ids[-1], ids[0]))
    for h in range(n_hospitals - 1):
        links.append((f"H{h + 1}-D1", f"H{h + 2}-D1"))
    return Topology("supernode", hospitals, devices, links)


# ------------------------------------------------------------------- config

@dataclass
class SimConfig:
    ticks: int
    spread_probability: float = 0.3
    initial_infections: Sequence[tuple[str, Family]] = ()
    fl_round_period: int = 5
    detection_window: int = 1
    seed: int = 0
    detection: bool = True
    tick_seconds: float = 10.0
    feature_dim: int = 520

    def __post_init__(self):
        if self.ticks < 0:
            raise ValueError("ticks must be >= 0")
        if not 0.0 <= self.spread_probability <= 1.0:
            raise ValueError("spread_probability must be in [0, 1]")
        if self.fl_round_period < 1 or self.detection_window < 1:
            raise ValueError("fl_round_period and detection_window must be >= 1")
        self.initial_infections = tuple(
            (dev, parse_family(fam) if isinstance(fam, str) else Family(fam))
            for dev, fam in self.initial_infections)
        for _, fam in self.initial_infections:
            if fam == Family.CLEAN:
                raise ValueError("initial infections need a ransomware family")

    def to_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "spread_probability": self.spread_probability,
            "initial_infections": [[d, f.name] for d, f in self.initial_infections],
            "fl_round_period": self.fl_round_period,
            "detection_window": self.detection_window,
            "seed": self.seed,
            "detection": self.detection,
            "tick_seconds": self.tick_seconds,
            "feature_dim": self.feature_dim,
        }


# ----------------------------------------------------------------- learners

class Learner(TypingProtocol):
    def next_model(self, round_index: int):
        ...


class OracleModel:
    """Flags exactly the windows whose majority family is ransomware."""

    def classify_window(self, features) -> float:
        return 0.0 if features.family == Family.CLEAN else 1.0


class OracleLearner:
    def next_model(self, round_index: int):
        return OracleModel()


class FixedLearner:
    """Deploys the same pre-trained model at every round."""

    def __init__(self, model):
        self.model = model

    def next_model(self, round_index: int):
        return self.model


class FederatedLearner:
    """Runs ``config.rounds`` FedAvg rounds per call, resuming from the last global model."""

    def __init__(self, client_datasets, config: FLConfig):
        self.clients = list(client_datasets)
        self.config = config
        self._params = None
        self._done = 0
        self.logs = []

    def next_model(self, round_index: int):
        model, logs = run_federated(self.config, self.clients, None,
                                    initial=self._params, round_offset=self._done)
        self._params = model.to_params()
        self._done += self.config.rounds
        self.logs += logs
        return model


# ------------------------------------------------------------------ running

@dataclass
class SimReport:
    events: list[dict]
    per_tick: list[dict]
    final_counts: dict
    containment_tick: int | None
    time_to_containment: int | None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "config": self.config,
            "final_counts": self.final_counts,
            "containment_tick": self.containment_tick,
            "time_to_containment": self.time_to_containment,
            "events": self.events,
            "per_tick": self.per_tick,
        }
        return json.dumps(body, indent=2) + "\n"

    def summary_csv(self) -> str:
        cols = ["tick", "clean", "infected", "quarantined", "new_infections",
                "detections", "flows", "dropped"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.per_tick:
            w.writerow([row[c] for c in cols])
        return buf.getvalue()

    def of_type(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["event"] == kind]


class Simulation:
    def __init__(self, topology: Topology, config: SimConfig, learner=None):
        self.topo = topology
        self.cfg = config
        self.learner = learner if learner is not None else OracleLearner()
        n = len(topology.devices)
        self.status = np.full(n, InfectionState.CLEAN, dtype=np.int64)
        self.family = np.full(n, int(Family.CLEAN), dtype=np.int64)
        self.infected_at = np.full(n, -1, dtype=np.int64)
        self.indptr, self.indices = topology.adjacency()
        self.rng = np.random.default_rng(config.seed)
        self.registry = ModelRegistry()
        self.repos = {h.id: PolicyRepository() for h in topology.hospitals}
        self.controller = {h.id: h.controller for h in topology.hospitals}
        self.context = FlowContext({d.ip: d.hospital for d in topology.devices})
        self.by_ip = {d.ip: i for i, d in enumerate(topology.devices)}
        self.window_config = WindowConfig(config.tick_seconds * config.detection_window,
                                          config.feature_dim)
        self.events: list[dict] = []
        self.per_tick: list[dict] = []
        self.pending = [[] for _ in range(n)]
        self.rounds = 0
        self.active_policy: str | None = None

    def _event(self, tick, kind, device=None, **extra):
        ev = {"tick": int(tick), "event": kind}
        if device is not None:
            ev["device"] = device
        ev.update(extra)
        self.events.append(ev)

    def _infect(self, tick, i, fam, source=None):
        self.status[i] = InfectionState.INFECTED
        self.family[i] = int(fam)
        self.infected_at[i] = tick
        self._event(tick, "infection", self.topo.devices[i].id, family=Family(fam).name,
                    source=source)

    def seed_infections(self):
        for dev, fam in self.cfg.initial_infections:
            i = self.topo.index(dev)
            if self.status[i] == InfectionState.CLEAN:
                self._infect(0, i, fam)

    def _emit(self, tick) -> int:
        ts = self.cfg.tick_seconds
        base = (tick - 1) * ts
        total = 0
        for i, dev in enumerate(self.topo.devices):
            if self.status[i] == InfectionState.QUARANTINED:
                continue
            fam = Family(int(self.family[i])) if self.status[i] == InfectionState.INFECTED \
                else Family.CLEAN
            rows = window_flows(self.rng, fam, [dev.ip])
            offs = np.sort(self.rng.uniform(0.001, 0.999, len(rows)))
            recs = [FlowRecord(base + u * ts, src, dst, Protocol(proto), pk, load, iat, fam)
                    for (proto, src, dst, pk, load, iat), u in zip(rows, offs)]
            self.pending[i].extend(recs)
            total += len(recs)
        return total

    def _spread(self, tick) -> int:
        uniforms = self.rng.random(self.indices.shape[0])
        infected = self.status == InfectionState.INFECTED
        susceptible = self.status == InfectionState.CLEAN
        hit = _accel.spread(self.indptr, self.indices, infected, susceptible, uniforms,
                            float(self.cfg.spread_probability))
        new = np.nonzero(hit >= 0)[0]
        for t in new:
            s = int(hit[t])
            self._infect(tick, int(t), int(self.family[s]), self.topo.devices[s].id)
        return len(new)

    def _fl_round(self, tick):
        k = self.rounds
        self.rounds += 1
        model_id = f"W{k}"
        self.registry.register(model_id, self.learner.next_model(k))
        self._event(tick, "fl_round", round=k, model=model_id)
        policy = compile_policy(model_id, self.registry, QUARANTINE_SOURCE,
                                policy_id=f"fl-{model_id}")
        for h in self.topo.hospitals:
            repo = self.repos[h.id]
            if self.active_policy is not None:
                repo.remove(self.active_policy)
            repo.install(policy)
            self._event(tick, "policy_install", controller=h.controller,
                        policy_id=policy.policy_id, model=model_id)
        self.active_policy = policy.policy_id

    def _evaluate(self, tick) -> tuple[int, int]:
        end = tick * self.cfg.tick_seconds
        detections = dropped = 0
        for i, dev in enumerate(self.topo.devices):
            recs, self.pending[i] = self.pending[i], []
            if not recs or self.status[i] == InfectionState.QUARANTINED:
                continue
            fv = aggregate_window(recs, self.window_config, window_end=end)
            policies = self.repos[dev.hospital].snapshot()
            cache: dict = {}
            first = None
            n_drop = 0
            for rec in recs:
                v = evaluate(policies, rec, fv, self.registry, self.context, cache=cache)
                if v.matched and v.action.kind in (ActionKind.DROP,
                                                   ActionKind.QUARANTINE_SOURCE):
                    n_drop += 1
                    first = first or v
            if first is None:
                continue
            detections += 1
            dropped += n_drop
            self._event(tick, "detection", dev.id, policy_id=first.triggered_policy_id,
                        probability=first.classifier_output, dropped=n_drop,
                        state=InfectionState(int(self.status[i])).name)
            if first.action.kind == ActionKind.QUARANTINE_SOURCE:
                self.status[i] = InfectionState.QUARANTINED
                self._event(tick, "quarantine", dev.id, controller=self.controller[dev.hospital])
        return detections, dropped

    def step(self, tick: int) -> None:
        flows = self._emit(tick)
        new = self._spread(tick)
        detections = dropped = 0
        if self.cfg.detection:
            if (tick - 1) % self.cfg.fl_round_period == 0:
                self._fl_round(tick)
            if tick % self.cfg.detection_window == 0:
                detections, dropped = self._evaluate(tick)
        elif tick % self.cfg.detection_window == 0:
            self.pending = [[] for _ in self.pending]
        counts = self.counts()
        self.per_tick.append({"tick": tick, **counts, "new_infections": new,
                              "detections": detections, "flows": flows, "dropped": dropped})

    def counts(self) -> dict:
        return {s.name.lower(): int(np.sum(self.status == s)) for s in InfectionState}

    def report(self) -> SimReport:
        first = int(self.infected_at[self.infected_at >= 0].min()) \
            if np.any(self.infected_at >= 0) else None
        # infections only spread from infected devices, so zero stays zero
        contained = next((row["tick"] for row in self.per_tick
                          if first is not None and row["infected"] == 0), None)
        return SimReport(self.events, self.per_tick, self.counts(), contained,
                         None if contained is None else contained - first, self.cfg.to_dict())


def run(topology: Topology, config: SimConfig, learner=None) -> SimReport:
    """Simulate ``config.ticks`` ticks (numbered from 1); deterministic for a seed."""
    for dev, _ in config.initial_infections:
        topology.index(dev)
    sim = Simulation(topology, config, learner)
    for tick in range(1, config.ticks + 1):
        if tick == 1:
            # logged at tick 0, so a zero-tick run has an empty timeline
            sim.seed_infections()
        sim.step(tick)
    return sim.report()
