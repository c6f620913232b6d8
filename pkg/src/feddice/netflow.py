"""Netflow records, window aggregation, dataset splits and client partitions.

Feature layout
--------------
Every window is summarised per protocol (TCP, UDP, ARP, OTHER, in that order)
by the same 24 statistics, listed in ``BLOCK_FEATURES``. The 96 aggregate
features are followed by zero padding up to ``WindowConfig.feature_dim``
(520 by default), or truncated if ``feature_dim`` is smaller.

Raw feature values are kept unscaled on ``FeatureVector`` / ``Dataset.X``.
Models consume ``log_scale(X)`` (a fixed, data-independent signed log1p), so
centralized and federated pipelines see identical inputs without sharing
any statistics between clients.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _accel
from .errors import EmptyWindow, InsufficientData, IoError, MissingFamily, SchemaError

logger = logging.getLogger(__name__)


class Protocol(enum.IntEnum):
    TCP = 0
    UDP = 1
    ARP = 2
    OTHER = 3


class Family(enum.IntEnum):
    CLEAN = 0
    RW_WC = 1
    RW_PY = 2
    RW_BR = 3
    RW_PG = 4


class Label(enum.IntEnum):
    RANSOMWARE = 0
    CLEAN = 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class Provenance(str, enum.Enum):
    SYNTHETIC = "SYNTHETIC"
    INGESTED = "INGESTED"


class Scenario(str, enum.Enum):
    IID_3 = "IID_3"
    IID_4 = "IID_4"
    NONIID_3 = "NONIID_3"
    NONIID_4 = "NONIID_4"

    @property
    def num_clients(self) -> int:
        return 3 if self.value.endswith("3") else 4

    @property
    def iid(self) -> bool:
        return self.value.startswith("IID")


# experiment case names used by the CLI
CASES = {
    "I-A": Scenario.IID_3,
    "I-B": Scenario.IID_4,
    "II-A": Scenario.NONIID_3,
    "II-B": Scenario.NONIID_4,
}

FAMILY_DISPLAY = {
    Family.CLEAN: "Clean",
    Family.RW_WC: "RW-WC",
    Family.RW_PY: "RW-PY",
    Family.RW_BR: "RW-BR",
    Family.RW_PG: "RW-PG",
}

# non-IID roles: one tuple of ransomware families per client
NONIID_ROLES = {
    Scenario.NONIID_4: ((Family.RW_WC,), (Family.RW_PY,), (Family.RW_BR,), (Family.RW_PG,)),
    Scenario.NONIID_3: ((Family.RW_WC,), (Family.RW_PY, Family.RW_BR), (Family.RW_PG,)),
}

# per-family window totals of the reference 10 s dataset
REFERENCE_TOTALS = {
    Family.CLEAN: 100000,
    Family.RW_WC: 25000,
    Family.RW_PY: 981,
    Family.RW_BR: 389,
    Family.RW_PG: 24170,
}


def parse_family(text: str) -> Family:
    key = str(text).strip().upper().replace("-", "_")
    aliases = {
        "CLEAN": Family.CLEAN, "NORMAL": Family.CLEAN, "BENIGN": Family.CLEAN,
        "RW_WC": Family.RW_WC, "WC": Family.RW_WC, "WANNACRY": Family.RW_WC,
        "RW_PY": Family.RW_PY, "PY": Family.RW_PY, "PETYA": Family.RW_PY,
        "RW_BR": Family.RW_BR, "BR": Family.RW_BR, "BADRABBIT": Family.RW_BR,
        "RW_PG": Family.RW_PG, "PG": Family.RW_PG, "POWERGHOST": Family.RW_PG,
    }
    try:
        return aliases[key]
    except KeyError:
        raise ValueError(f"unknown family {text!r}") from None


def parse_protocol(text: str) -> Protocol:
    key = str(text).strip().upper()
    if key in ("TCP", "6"):
        return Protocol.TCP
    if key in ("UDP", "17"):
        return Protocol.UDP
    if key == "ARP":
        return Protocol.ARP
    return Protocol.OTHER


def label_of(family) -> Label:
    return Label.CLEAN if Family(family) == Family.CLEAN else Label.RANSOMWARE


# ------------------------------------------------------------------ records

@dataclass(slots=True)
class FlowRecord:
    start_time: float
    src_ip: str
    dst_ip: str
    protocol: Protocol
    total_packets: int
    total_load: float
    src_inter_arrival_mean: float
    family: Family = Family.CLEAN
    src_mac: str | None = None
    dst_mac: str | None = None

    def __post_init__(self):
        if not (self.start_time >= 0.0) or math.isinf(self.start_time):
            raise ValueError(f"start_time must be finite and >= 0, got {self.start_time}")
        if self.total_packets < 0:
            raise ValueError("total_packets must be >= 0")
        if not (self.total_load >= 0.0):
            raise ValueError("total_load must be >= 0")
        if not (self.src_inter_arrival_mean >= 0.0):
            raise ValueError("src_inter_arrival_mean must be >= 0")


@dataclass(frozen=True)
class WindowConfig:
    duration: float = 10.0
    feature_dim: int = 520

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be > 0")


BLOCK_FEATURES = (
    "count", "distinct_dst", "distinct_src",
    "packet_sum", "packet_mean", "packet_var",
    "load_sum", "load_mean", "load_var",
    "iat_mean", "iat_var", "bytes_per_packet",
    *(f"hist_{k}" for k in range(_accel.N_HIST)),
    "last_packets", "last_load", "last_iat", "last_age",
)
BLOCK_SIZE = len(BLOCK_FEATURES)
N_AGGREGATE = BLOCK_SIZE * len(Protocol)
FEATURE_NAMES = tuple(f"{p.name.lower()}_{f}" for p in Protocol for f in BLOCK_FEATURES)


def feature_index(name: str) -> int:
    """Column of a named aggregate feature, e.g. ``"tcp_packet_sum"``."""
    return FEATURE_NAMES.index(name)


def log_scale(x):
    """Signed log1p applied to raw features before they reach a model."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


@dataclass
class FeatureVector:
    values: np.ndarray
    label: Label
    family: Family
    window_end: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("feature values must be a vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if (self.label == Label.RANSOMWARE) != (self.family != Family.CLEAN):
            raise ValueError("label must be RANSOMWARE iff family is not CLEAN")

    def inputs(self) -> np.ndarray:
        return log_scale(self.values)


# ----------------------------------------------------------- columnar windows

@dataclass
class _Columns:
    start: np.ndarray
    proto: np.ndarray
    packets: np.ndarray
    load: np.ndarray
    iat: np.ndarray
    family: np.ndarray
    src: np.ndarray
    dst: np.ndarray


def _to_columns(records: Sequence[FlowRecord]) -> _Columns:
    n = len(records)
    start = np.fromiter((r.start_time for r in records), np.float64, n)
    proto = np.fromiter((int(r.protocol) for r in records), np.int64, n)
    packets = np.fromiter((r.total_packets for r in records), np.float64, n)
    load = np.fromiter((r.total_load for r in records), np.float64, n)
    iat = np.fromiter((r.src_inter_arrival_mean for r in records), np.float64, n)
    family = np.fromiter((int(r.family) for r in records), np.int64, n)
    _, src = np.unique(np.array([r.src_ip for r in records]), return_inverse=True)
    _, dst = np.unique(np.array([r.dst_ip for r in records]), return_inverse=True)
    return _Columns(start, proto, packets, load, iat, family,
                    src.astype(np.int64).ravel(), dst.astype(np.int64).ravel())


def _distinct_per_key(key: np.ndarray, code: np.ndarray, n_keys: int) -> np.ndarray:
    width = int(code.max()) + 1 if code.size else 1
    combo = np.unique(key * width + code)
    return np.bincount(combo // width, minlength=n_keys).astype(np.float64)


def _majority_family(group: np.ndarray, family: np.ndarray, n_groups: int) -> np.ndarray:
    nf = len(Family)
    counts = np.bincount(group * nf + family, minlength=n_groups * nf).reshape(n_groups, nf)
    # ties go to ransomware (conservative), then to the lower family code
    score = counts * (2 * nf) + np.array([0] + [nf - k + nf for k in range(1, nf)])
    score[counts == 0] = -1
    return np.argmax(score, axis=1)


def _window_matrix(cols: _Columns, offsets: np.ndarray, window_end: np.ndarray,
                   config: WindowConfig):
    n_groups = offsets.shape[0] - 1
    stats = _accel.window_stats(offsets, cols.proto, cols.packets, cols.load,
                                cols.iat, cols.start, window_end)
    group = np.repeat(np.arange(n_groups), np.diff(offsets))
    key = group * len(Protocol) + cols.proto
    n_keys = n_groups * len(Protocol)
    block = np.empty((n_groups, len(Protocol), BLOCK_SIZE))
    block[:, :, 0] = stats[:, :, _accel.ST_COUNT]
    block[:, :, 1] = _distinct_per_key(key, cols.dst, n_keys).reshape(n_groups, -1)
    block[:, :, 2] = _distinct_per_key(key, cols.src, n_keys).reshape(n_groups, -1)
    block[:, :, 3:] = stats[:, :, 1:]
    agg = block.reshape(n_groups, N_AGGREGATE)
    X = np.zeros((n_groups, config.feature_dim))
    k = min(config.feature_dim, N_AGGREGATE)
    X[:, :k] = agg[:, :k]
    fam = _majority_family(group, cols.family, n_groups)
    return X, fam


def aggregate_window(records: Sequence[FlowRecord], config: WindowConfig = WindowConfig(),
                     window_end: float | None = None) -> FeatureVector:
    """Summarise the flows of one window into a fixed-width feature vector.

    ``window_end`` defaults to the window boundary following the latest
    record. Records outside ``(window_end - duration, window_end]`` raise
    ``ValueError``.
    """
    if not records:
        raise EmptyWindow("no records in window")
    d = config.duration
    if window_end is None:
        window_end = math.ceil(max(r.start_time for r in records) / d) * d
    lo = window_end - d
    for r in records:
        if not (lo < r.start_time <= window_end):
            raise ValueError(f"record at t={r.start_time} outside window ({lo}, {window_end}]")
    order = sorted(range(len(records)), key=lambda i: records[i].start_time)
    cols = _to_columns([records[i] for i in order])
    offsets = np.array([0, len(records)], dtype=np.int64)
    X, fam = _window_matrix(cols, offsets, np.array([float(window_end)]), config)
    family = Family(int(fam[0]))
    return FeatureVector(X[0], label_of(family), family, float(window_end))


def windows_from_flows(flows: Sequence[FlowRecord], config: WindowConfig = WindowConfig()):
    """Assign flows to non-overlapping windows of ``config.duration``.

    Returns ``(X, family, window_end)`` with one row per non-empty window, in
    time order. Empty windows never appear.
    """
    if not flows:
        return np.zeros((0, config.feature_dim)), np.zeros(0, np.int64), np.zeros(0)
    cols = _to_columns(flows)
    d = config.duration
    widx = np.ceil(cols.start / d).astype(np.int64)
    order = np.lexsort((cols.start, widx))
    cols = _Columns(*(getattr(cols, f)[order] for f in _Columns.__dataclass_fields__))
    widx = widx[order]
    uniq, first = np.unique(widx, return_index=True)
    offsets = np.append(first, widx.shape[0]).astype(np.int64)
    window_end = uniq.astype(np.float64) * d
    X, fam = _window_matrix(cols, offsets, window_end, config)
    return X, fam, window_end


# -------------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Window feature matrix plus per-sample family tags and identities.

    ``ids`` identify samples across splits and partitions; they are unique
    within the output of one ``build_dataset`` call.
    """

    X: np.ndarray
    family: np.ndarray
    window_end: np.ndarray
    ids: np.ndarray
    split: Split = Split.TRAIN
    provenance: Provenance = Provenance.SYNTHETIC

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.family = np.asarray(self.family, dtype=np.int64)
        self.window_end = np.asarray(self.window_end, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.X.shape[0]
        if not (self.family.shape == (n,) and self.window_end.shape == (n,)
                and self.ids.shape == (n,)):
            raise ValueError("dataset columns have inconsistent lengths")

    def __len__(self):
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.where(self.family == Family.CLEAN, int(Label.CLEAN), int(Label.RANSOMWARE))

    def inputs(self) -> np.ndarray:
        return log_scale(self.X)

    @property
    def samples(self) -> list[FeatureVector]:
        return [FeatureVector(self.X[i], label_of(f), Family(int(f)), float(self.window_end[i]))
                for i, f in enumerate(self.family)]

    def family_counts(self) -> dict[Family, int]:
        c = np.bincount(self.family, minlength=len(Family))
        return {f: int(c[f]) for f in Family}

    def subset(self, idx, split: Split | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.family[idx], self.window_end[idx], self.ids[idx],
                       split or self.split, self.provenance)

    @staticmethod
    def concat(parts: Sequence["Dataset"], split: Split | None = None) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        ds = Dataset(np.concatenate([p.X for p in parts]),
                     np.concatenate([p.family for p in parts]),
                     np.concatenate([p.window_end for p in parts]),
                     np.concatenate([p.ids for p in parts]),
                     split or parts[0].split, parts[0].provenance)
        return ds.subset(np.argsort(ds.ids, kind="stable"))

    # newline-delimited JSON cache, one sample per line
    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i in range(len(self)):
                fam = Family(int(self.family[i]))
                rec = {
                    "id": int(self.ids[i]),
                    "family": fam.name,
                    "label": int(label_of(fam)),
                    "window_end": float(self.window_end[i]),
                    "split": self.split.value,
                    "provenance": self.provenance.value,
                    "values": [float(v) for v in self.X[i]],
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise IoError(str(exc)) from exc
        recs = [json.loads(line) for line in lines if line.strip()]
        if not recs:
            raise SchemaError(f"{path}: empty dataset cache")
        X = np.array([r["values"] for r in recs], dtype=np.float64)
        return cls(X,
                   np.array([Family[r["family"]] for r in recs], dtype=np.int64),
                   np.array([r["window_end"] for r in recs], dtype=np.float64),
                   np.array([r["id"] for r in recs], dtype=np.int64),
                   Split(recs[0]["split"]), Provenance(recs[0]["provenance"]))


def _split_counts(n: int, ratios) -> tuple[int, int, int]:
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def build_dataset(flows: Sequence[FlowRecord], config: WindowConfig = WindowConfig(),
                  split_ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  provenance: Provenance = Provenance.SYNTHETIC):
    """Window the flows and split every family by ``split_ratios``.

    Train and validation counts are floored per family; the test split takes
    the remainder. Each family is shuffled with a seeded generator before
    splitting, and samples inside each split stay in time order.
    """
    ratios = tuple(float(r) for r in split_ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1: {ratios}")
    X, fam, wend = windows_from_flows(flows, config)
    full = Dataset(X, fam, wend, np.arange(X.shape[0]), Split.TRAIN, provenance)
    rng = np.random.default_rng(seed)
    parts = {Split.TRAIN: [], Split.VAL: [], Split.TEST: []}
    for f in Family:
        idx = np.nonzero(fam == f)[0]
        if idx.size == 0:
            continue
        if idx.size < 3:
            raise InsufficientData(f"{f.name}: {idx.size} windows, need at least 3")
        idx = rng.permutation(idx)
        a, b, _ = _split_counts(idx.size, ratios)
        parts[Split.TRAIN].append(idx[:a])
        parts[Split.VAL].append(idx[a:a + b])
        parts[Split.TEST].append(idx[a + b:])
    out = []
    for split in (Split.TRAIN, Split.VAL, Split.TEST):
        sel = np.sort(np.concatenate(parts[split])) if parts[split] else np.zeros(0, np.int64)
        out.append(full.subset(sel, split))
    for ds in out:
        logger.debug("%s split: %s", ds.split.value,
                     {FAMILY_DISPLAY[f]: c for f, c in ds.family_counts().items()})
    return tuple(out)


def partition(train: Dataset, scenario: Scenario | str, seed: int = 0) -> list[Dataset]:
    """Split a training set across simulated clients.

    IID scenarios give each client an equal seeded share of every family.
    Non-IID scenarios give every client an equal share of the clean samples
    plus all samples of the ransomware families in its role.
    """
    scenario = Scenario(scenario)
    n_clients = scenario.num_clients
    rng = np.random.default_rng(seed)
    counts = train.family_counts()
    shares: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    if scenario.iid:
        missing = [f.name for f in Family if counts[f] == 0]
        if missing:
            raise MissingFamily(f"IID partition needs every family; missing {missing}")
        for f in Family:
            idx = rng.permutation(np.nonzero(train.family == f)[0])
            for k, chunk in enumerate(np.array_split(idx, n_clients)):
                shares[k].append(chunk)
    else:
        roles = NONIID_ROLES[scenario]
        needed = [Family.CLEAN] + [f for role in roles for f in role]
        missing = [f.name for f in needed if counts[f] == 0]
        if missing:
            raise MissingFamily(f"{scenario.value} needs {missing}")
        clean = rng.permutation(np.nonzero(train.family == Family.CLEAN)[0])
        for k, chunk in enumerate(np.array_split(clean, n_clients)):
            shares[k].append(chunk)
            for f in roles[k]:
                shares[k].append(np.nonzero(train.family == f)[0])
    return [train.subset(np.sort(np.concatenate(s))) for s in shares]


def scenario_test_set(val: Dataset, test: Dataset, scenario: Scenario | str | None) -> Dataset:
    """Global test set for a scenario.

    Non-IID experiments evaluate on the union of the validation and test
    splits (the composition used for the per-client setup); IID ones use the
    test split alone.
    """
    if scenario is not None and not Scenario(scenario).iid:
        return Dataset.concat([val, test], Split.TEST)
    return test


# ------------------------------------------------------------------ ingestion

DEFAULT_COLUMNS = {
    "start_time": "start_time",
    "src_ip": "src_ip",
    "dst_ip": "dst_ip",
    "protocol": "protocol",
    "total_packets": "total_packets",
    "total_load": "total_load",
    "src_inter_arrival_mean": "src_iat",
    "family": "family",
    "src_mac": "src_mac",
    "dst_mac": "dst_mac",
}
_OPTIONAL = ("src_mac", "dst_mac")


@dataclass
class SchemaConfig:
    """Maps FlowRecord fields to CSV header names."""
    columns: dict = field(default_factory=lambda: dict(DEFAULT_COLUMNS))

    @classmethod
    def from_mapping(cls, overrides: Mapping[str, str]) -> "SchemaConfig":
        cols = dict(DEFAULT_COLUMNS)
        unknown = set(overrides) - set(cols)
        if unknown:
            raise SchemaError(f"unknown record fields in column map: {sorted(unknown)}")
        cols.update(overrides)
        return cls(cols)


@dataclass
class IngestResult:
    records: list
    rows: int
    skipped: int


def ingest_csv(path, schema: SchemaConfig | None = None) -> IngestResult:
    """Read a netflow CSV into FlowRecords.

    Malformed rows are skipped and counted. More than half malformed raises
    ``SchemaError``. Records come back sorted by start time (stable).
    """
    schema = schema or SchemaConfig()
    cols = schema.columns
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [c for k, c in cols.items() if k not in _OPTIONAL]
        absent = [c for c in required if c not in header]
        if absent:
            raise SchemaError(f"{path}: header lacks columns {absent}")
        records, rows, skipped = [], 0, 0
        for row in reader:
            rows += 1
            try:
                rec = FlowRecord(
                    start_time=float(row[cols["start_time"]]),
                    src_ip=row[cols["src_ip"]].strip(),
                    dst_ip=row[cols["dst_ip"]].strip(),
                    protocol=parse_protocol(row[cols["protocol"]]),
                    total_packets=_parse_count(row[cols["total_packets"]]),
                    total_load=float(row[cols["total_load"]]),
                    src_inter_arrival_mean=float(row[cols["src_inter_arrival_mean"]]),
                    family=parse_family(row[cols["family"]]),
                    src_mac=(row.get(cols["src_mac"]) or None),
                    dst_mac=(row.get(cols["dst_mac"]) or None),
                )
                if not rec.src_ip or not rec.dst_ip:
                    raise ValueError("empty address")
                if not (math.isfinite(rec.total_load) and math.isfinite(rec.src_inter_arrival_mean)):
                    raise ValueError("non-finite value")
            except (ValueError, TypeError, KeyError, AttributeError):
                skipped += 1
                continue
            records.append(rec)
    if rows == 0 or skipped * 2 > rows:
        raise SchemaError(f"{path}: {skipped} of {rows} rows malformed")
    if skipped:
        logger.warning("%s: skipped %d malformed rows of %d", path, skipped, rows)
    records.sort(key=lambda r: r.start_time)
    return IngestResult(records, rows, skipped)


def _parse_count(text) -> int:
    v = float(text)
    if not v.is_integer():
        raise ValueError("packet count must be an integer")
    return int(v)


def flows_to_csv(records: Iterable[FlowRecord], path) -> None:
    """Write records with the default column names (inverse of ingest_csv)."""
    names = list(DEFAULT_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([DEFAULT_COLUMNS[n] for n in names])
        for r in records:
            w.writerow([repr(float(r.start_time)), r.src_ip, r.dst_ip, r.protocol.name,
                        r.total_packets, repr(float(r.total_load)),
                        repr(float(r.src_inter_arrival_mean)), r.family.name,
                        r.src_mac or "", r.dst_mac or ""])
