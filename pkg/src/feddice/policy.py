"""Match-action policies gated by a trained detector, and a snapshot repository.

A policy matches a flow when every profile field matches (``"*"`` or an
exact literal, numeric flow fields within a relative tolerance) and, unless
its model is ``"*"``, the referenced model flags the flow's window as
ransomware. Policies are tried in order and the first match wins.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DuplicateId, PolicyError, UnknownId, UnknownModel
from .netflow import FeatureVector, FlowRecord, Label, Protocol

logger = logging.getLogger(__name__)

WILDCARD = "*"
DEFAULT_TOLERANCE = 0.1

_SRC_KEYS = ("domain", "ip", "mac", "service_type")
_DST_KEYS = ("domain", "ip", "mac")
_FLOW_KEYS = ("frequency", "packet_size", "payload_type")
_POLICY_KEYS = ("policy_id", "src_profile", "dst_profile", "flow_profile", "model", "action")


class ActionKind(str, enum.Enum):
    DROP = "DROP"
    ALLOW = "ALLOW"
    ROUTE_VIA = "ROUTE_VIA"
    # drop the flow and remove its source device from the network
    QUARANTINE_SOURCE = "QUARANTINE_SOURCE"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    node: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if (self.kind == ActionKind.ROUTE_VIA) != bool(self.node):
            raise PolicyError("ROUTE_VIA needs a node id and other actions take none")

    def __str__(self) -> str:
        return f"ROUTE_VIA:{self.node}" if self.kind == ActionKind.ROUTE_VIA else self.kind.value

    @classmethod
    def parse(cls, text) -> "Action":
        if isinstance(text, Action):
            return text
        if not isinstance(text, str):
            raise PolicyError(f"action must be a string, got {type(text).__name__}")
        if text.startswith("ROUTE_VIA:"):
            return cls(ActionKind.ROUTE_VIA, text.split(":", 1)[1])
        try:
            return cls(ActionKind(text))
        except ValueError:
            raise PolicyError(f"unknown action {text!r}") from None


DROP = Action(ActionKind.DROP)
ALLOW = Action(ActionKind.ALLOW)
QUARANTINE_SOURCE = Action(ActionKind.QUARANTINE_SOURCE)


def _check_text(name, value):
    if not isinstance(value, str) or not value:
        raise PolicyError(f"{name} must be a non-empty string")


@dataclass(frozen=True)
class Profile:
    """Endpoint profile. Destination profiles leave ``service_type`` as ``"*"``."""

    domain: str = WILDCARD
    ip: str = WILDCARD
    mac: str = WILDCARD
    service_type: str = WILDCARD

    def __post_init__(self):
        for k in _SRC_KEYS:
            _check_text(k, getattr(self, k))


@dataclass(frozen=True)
class FlowProfile:
    frequency: float | str = WILDCARD
    packet_size: float | str = WILDCARD
    payload_type: str = WILDCARD

    def __post_init__(self):
        for k in ("frequency", "packet_size"):
            v = getattr(self, k)
            if isinstance(v, str):
                if v != WILDCARD:
                    raise PolicyError(f"{k} must be a number or '*'")
            elif isinstance(v, bool) or not isinstance(v, (int, float)) \
                    or not math.isfinite(v) or v < 0:
                raise PolicyError(f"{k} must be a finite number >= 0")
            else:
                object.__setattr__(self, k, float(v))
        _check_text("payload_type", self.payload_type)


@dataclass(frozen=True)
class Policy:
    policy_id: str
    src_profile: Profile = field(default_factory=Profile)
    dst_profile: Profile = field(default_factory=Profile)
    flow_profile: FlowProfile = field(default_factory=FlowProfile)
    model: str = WILDCARD
    action: Action = DROP

    def __post_init__(self):
        _check_text("policy_id", self.policy_id)
        _check_text("model", self.model)
        if self.dst_profile.service_type != WILDCARD:
            raise PolicyError("dst_profile has no service_type")
        object.__setattr__(self, "action", Action.parse(self.action))

    def to_dict(self) -> dict:
        fp = self.flow_profile
        return {
            "policy_id": self.policy_id,
            "src_profile": {k: getattr(self.src_profile, k) for k in _SRC_KEYS},
            "dst_profile": {k: getattr(self.dst_profile, k) for k in _DST_KEYS},
            "flow_profile": {"frequency": fp.frequency, "packet_size": fp.packet_size,
                             "payload_type": fp.payload_type},
            "model": self.model,
            "action": str(self.action),
        }

    @classmethod
    def from_dict(cls, d) -> "Policy":
        if not isinstance(d, Mapping):
            raise PolicyError("policy must be a JSON object")
        _exact_keys("policy", d, _POLICY_KEYS)
        for name, keys in (("src_profile", _SRC_KEYS), ("dst_profile", _DST_KEYS),
                           ("flow_profile", _FLOW_KEYS)):
            if not isinstance(d[name], Mapping):
                raise PolicyError(f"{name} must be a JSON object")
            _exact_keys(name, d[name], keys)
        return cls(policy_id=d["policy_id"], src_profile=Profile(**d["src_profile"]),
                   dst_profile=Profile(**d["dst_profile"]),
                   flow_profile=FlowProfile(**d["flow_profile"]),
                   model=d["model"], action=Action.parse(d["action"]))


def _exact_keys(where, d, keys):
    unknown = [k for k in d if k not in keys]
    missing = [k for k in keys if k not in d]
    if unknown:
        raise PolicyError(f"{where}: unknown field(s) {unknown}")
    if missing:
        raise PolicyError(f"{where}: missing field(s) {missing}")


# ------------------------------------------------------------ serialization

def dumps_policies(policies: Iterable[Policy]) -> str:
    """Canonical JSON text: fixed key order, two-space indent, trailing newline."""
    return json.dumps([p.to_dict() for p in policies], indent=2, ensure_ascii=False) + "\n"


def loads_policies(text: str) -> list[Policy]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyError(f"invalid JSON: {exc}") from None
    if not isinstance(data, list):
        raise PolicyError("policy file must hold a JSON array")
    policies = [Policy.from_dict(d) for d in data]
    seen = set()
    for p in policies:
        if p.policy_id in seen:
            raise DuplicateId(f"duplicate policy_id {p.policy_id!r}")
        seen.add(p.policy_id)
    return policies


def validate_file(path) -> list[Policy]:
    """Parse and schema-check a policy file; raises ``PolicyError`` on violations."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise PolicyError(f"cannot read {path}: {exc}") from None
    return loads_policies(text)


# ----------------------------------------------------------------- registry

class ModelRegistry:
    """Checkpoint id to model mapping consulted by the evaluation engine."""

    def __init__(self, models: Mapping[str, object] | None = None):
        self._models = dict(models or {})
        self._lock = threading.Lock()

    def register(self, model_id: str, model) -> None:
        _check_text("model id", model_id)
        if model_id == WILDCARD:
            raise PolicyError("'*' is reserved for model-free policies")
        with self._lock:
            self._models = {**self._models, model_id: model}

    def get(self, model_id: str):
        try:
            return self._models[model_id]
        except KeyError:
            raise UnknownModel(f"no model registered as {model_id!r}") from None

    def __contains__(self, model_id) -> bool:
        return model_id in self._models

    def ids(self) -> list[str]:
        return list(self._models)


def compile_policy(model_id: str, registry: ModelRegistry, action=DROP,
                   src: Profile | None = None, dst: Profile | None = None,
                   flow: FlowProfile | None = None, policy_id: str | None = None) -> Policy:
    """Wrap a registered model into a policy; scope defaults to all wildcards."""
    if model_id not in registry:
        raise UnknownModel(f"no model registered as {model_id!r}")
    return Policy(policy_id or f"auto-{model_id}", src or Profile(), dst or Profile(),
                  flow or FlowProfile(), model_id, Action.parse(action))


# --------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class Verdict:
    matched: bool
    triggered_policy_id: str | None = None
    action: Action | None = None
    # P(ransomware) from the model of the matching policy
    classifier_output: float | None = None

    def __post_init__(self):
        if self.matched != (self.action is not None):
            raise ValueError("a verdict carries an action iff it matched")


NO_MATCH = Verdict(False)


@dataclass(frozen=True)
class FlowContext:
    """Facts about a flow that the record itself does not carry."""

    domains: Mapping[str, str] = field(default_factory=dict)
    payload_type: str | None = None


def classify(model, features: FeatureVector) -> tuple[bool, float]:
    """``(flagged, P(ransomware))`` for one window.

    Models may expose ``classify_window(features)`` returning P(ransomware);
    otherwise the flag follows the model's own ``predict`` on the log-scaled
    inputs and the probability is the complement of ``predict_proba``.
    """
    if hasattr(model, "classify_window"):
        p = float(model.classify_window(features))
        return p >= 0.5, p
    x = features.inputs()[None, :]
    flagged = int(model.predict(x)[0]) == Label.RANSOMWARE
    return flagged, 1.0 - float(model.predict_proba(x)[0])


def _text_match(pattern: str, value: str | None) -> bool:
    return pattern == WILDCARD or (value is not None and pattern == value)


def _num_match(pattern, value: float, tol: float) -> bool:
    if pattern == WILDCARD:
        return True
    if not math.isfinite(value):
        return False
    return abs(value - pattern) <= tol * pattern if pattern > 0 else value == 0.0


def flow_rates(flow: FlowRecord) -> tuple[float, float]:
    """(packets per second, bytes per packet) of a flow record."""
    iat = flow.src_inter_arrival_mean
    freq = 1.0 / iat if iat > 0 else math.inf
    size = flow.total_load / flow.total_packets if flow.total_packets else 0.0
    return freq, size


def profile_match(policy: Policy, flow: FlowRecord, context: FlowContext | None = None,
                  tolerance: float = DEFAULT_TOLERANCE) -> bool:
    ctx = context or FlowContext()
    sp, dp, fp = policy.src_profile, policy.dst_profile, policy.flow_profile
    proto = Protocol(flow.protocol).name
    if not (_text_match(sp.ip, flow.src_ip) and _text_match(sp.mac, flow.src_mac)
            and _text_match(sp.domain, ctx.domains.get(flow.src_ip))
            and (sp.service_type == WILDCARD or sp.service_type.upper() == proto)):
        return False
    if not (_text_match(dp.ip, flow.dst_ip) and _text_match(dp.mac, flow.dst_mac)
            and _text_match(dp.domain, ctx.domains.get(flow.dst_ip))):
        return False
    freq, size = flow_rates(flow)
    payload = ctx.payload_type if ctx.payload_type is not None else proto
    return (_num_match(fp.frequency, freq, tolerance)
            and _num_match(fp.packet_size, size, tolerance)
            and (fp.payload_type == WILDCARD or fp.payload_type.upper() == payload.upper()))


def evaluate(policies: Sequence[Policy], flow: FlowRecord, features: FeatureVector,
             registry: ModelRegistry, context: FlowContext | None = None,
             tolerance: float = DEFAULT_TOLERANCE, strict: bool = False,
             cache: dict | None = None) -> Verdict:
    """First-match-wins verdict for one flow and the features of its window.

    A policy naming an unregistered model is skipped and logged; with
    ``strict=True`` a ``PolicyError`` is raised instead. Flows of the same
    window may share a ``cache`` dict so each model classifies it once.
    """
    cache = {} if cache is None else cache
    for policy in policies:
        if not profile_match(policy, flow, context, tolerance):
            continue
        if policy.model == WILDCARD:
            return Verdict(True, policy.policy_id, policy.action, None)
        if policy.model not in cache:
            if policy.model not in registry:
                err = PolicyError(f"policy {policy.policy_id!r} references unknown model "
                                  f"{policy.model!r}")
                if strict:
                    raise err
                logger.error("%s; policy skipped", err)
                continue
            cache[policy.model] = classify(registry.get(policy.model), features)
        flagged, p = cache[policy.model]
        if flagged:
            return Verdict(True, policy.policy_id, policy.action, p)
    return NO_MATCH


# --------------------------------------------------------------- repository

class PolicyRepository:
    """Ordered policy store with copy-on-write snapshots.

    Readers take ``snapshot()``, an immutable tuple, and never block. Writers
    build a new tuple under a lock and swap it in; when ``path`` is set the
    new state is written to disk (via a temporary file and rename) first.
    """

    def __init__(self, policies: Iterable[Policy] = (), path=None):
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        snap = tuple(policies)
        ids = [p.policy_id for p in snap]
        if len(set(ids)) != len(ids):
            raise DuplicateId("duplicate policy ids")
        self._snapshot = snap

    @classmethod
    def load(cls, path) -> "PolicyRepository":
        return cls(validate_file(path), path)

    def snapshot(self) -> tuple[Policy, ...]:
        return self._snapshot

    def list(self) -> tuple[Policy, ...]:
        return self._snapshot

    def __len__(self):
        return len(self._snapshot)

    def __contains__(self, policy_id) -> bool:
        return any(p.policy_id == policy_id for p in self._snapshot)

    def _swap(self, new: tuple) -> None:
        if self.path is not None:
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text(dumps_policies(new), encoding="utf-8")
            os.replace(tmp, self.path)
        self._snapshot = new

    def install(self, policy: Policy) -> None:
        with self._lock:
            if policy.policy_id in self:
                raise DuplicateId(f"policy {policy.policy_id!r} already installed")
            self._swap(self._snapshot + (policy,))

    def remove(self, policy_id: str) -> Policy:
        with self._lock:
            for i, p in enumerate(self._snapshot):
                if p.policy_id == policy_id:
                    self._swap(self._snapshot[:i] + self._snapshot[i + 1:])
                    return p
            raise UnknownId(f"no policy {policy_id!r}")

    def dumps(self) -> str:
        return dumps_policies(self._snapshot)
