"""Command-line entry point: ``feddice <command> [options]``.

Every command writes into ``--out``: ``experiment.json`` (the resolved
options, enough to rerun), metric CSVs and markdown tables, and for training
commands a ``timing.csv`` and a model checkpoint. Metric files never contain
wall-clock values, so reruns with the same options are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, _accel
from .errors import FedDiceError
from .federation import FLConfig, compare_overhead, cross_evaluate, run_centralized, run_federated
from .metrics import CSV_COLUMNS, kfold
from .models import MODEL_KINDS, TrainConfig, save_checkpoint
from .netflow import (
    CASES, Dataset, Family, Provenance, SchemaConfig, Split, WindowConfig, build_dataset,
    flows_to_csv, ingest_csv, partition, scenario_test_set,
)
from .policy import validate_file
from .sim import FederatedLearner, OracleLearner, SimConfig, Topology, default_topology, run
from .synth import reference_counts, synthesize

logger = logging.getLogger("feddice")

SPLIT_FILES = {Split.TRAIN: "train.jsonl", Split.VAL: "val.jsonl", Split.TEST: "test.jsonl"}
FL_CONFIG_KEYS = ("rounds", "local_epochs", "learning_rate", "batch_size", "epochs", "workers")


class CliError(Exception):
    """Runtime failure reported on stderr with exit code 1."""


# ------------------------------------------------------------------ parsing

def _add_common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (falls back to $FEDDICE_SEED, then 0)")
    p.add_argument("--data", default="synthetic",
                   help="'synthetic', a directory of split .jsonl files, or a flow CSV")
    p.add_argument("--scale", type=float, default=0.05,
                   help="fraction of the reference window counts to synthesize")
    p.add_argument("--window", type=int, choices=(5, 10, 20), default=10,
                   help="window duration in seconds")
    p.add_argument("--out", default=None, help="run directory")
    if model:
        p.add_argument("--model", choices=MODEL_KINDS, default="lr")
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--learning-rate", type=float, default=0.01)
        p.add_argument("--batch-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddice",
                                     description="Federated ransomware detection experiments.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data-synth", help="generate synthetic flows and dataset splits")
    _add_common(p, model=False)
    p.add_argument("--flows", action="store_true", help="also write the raw flows as CSV")

    p = sub.add_parser("data-ingest", help="window a netflow CSV into dataset splits")
    _add_common(p, model=False)
    p.add_argument("--columns", default=None,
                   help="JSON object mapping record fields to CSV header names")

    p = sub.add_parser("train-centralized", help="pooled training baseline")
    _add_common(p)
    p.add_argument("--kfold", type=int, default=None, metavar="K",
                   help="also run stratified K-fold over train+val")

    p = sub.add_parser("train-federated", help="FedAvg over simulated clients")
    _add_common(p)
    p.add_argument("--case", required=True, choices=sorted(CASES))
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--local-epochs", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", default=None,
                   help=f"JSON file overriding any of {', '.join(FL_CONFIG_KEYS)}")

    p = sub.add_parser("eval-cross", help="train on each non-IID client, test on the others")
    _add_common(p)
    p.add_argument("--case", default="II-B", choices=("II-A", "II-B"))

    p = sub.add_parser("simulate", help="outbreak, detection and mitigation simulation")
    _add_common(p)
    p.add_argument("--topology", default=None, help="topology JSON (default: 4 hospitals)")
    p.add_argument("--hospitals", type=int, default=4)
    p.add_argument("--devices", type=int, default=5, help="devices per hospital")
    p.add_argument("--ticks", type=int, default=30)
    p.add_argument("--p", type=float, default=0.3, help="per-edge spread probability")
    p.add_argument("--fl-period", type=int, default=5)
    p.add_argument("--detection-window", type=int, default=1)
    p.add_argument("--infect", action="append", default=None, metavar="DEVICE:FAMILY",
                   help="initial infection (repeatable)")
    p.add_argument("--learner", choices=("federated", "oracle"), default="federated")
    p.add_argument("--case", default="I-B", choices=sorted(CASES),
                   help="client partition used by the federated learner")
    p.add_argument("--no-detection", action="store_true")

    p = sub.add_parser("report", help="centralized vs federated wall-clock for each model")
    _add_common(p)
    p.add_argument("--case", default="I-B", choices=sorted(CASES))
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--models", default=",".join(MODEL_KINDS))

    p = sub.add_parser("validate-policy", help="schema-check a policy repository file")
    p.add_argument("path")
    return parser


# ------------------------------------------------------------------ helpers

def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FEDDICE_SEED", "")
    if not env:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"FEDDICE_SEED must be an integer, got {env!r}") from None


def _experiment_record(args) -> dict:
    record = {k: v for k, v in sorted(vars(args).items()) if k not in ("log_level",)}
    record["feddice_version"] = __version__
    return record


def _out_dir(args) -> Path:
    out = Path(args.out or os.path.join("runs", args.command))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _train_config(args, seed) -> TrainConfig:
    return TrainConfig(args.learning_rate, args.epochs, args.batch_size, seed)


def _load_splits(args, seed):
    """(train, val, test) from the synthetic generator, a split cache or a CSV."""
    config = WindowConfig(duration=float(args.window))
    if args.data == "synthetic":
        flows = synthesize(seed, reference_counts(args.scale), duration=config.duration)
        return build_dataset(flows, config, seed=seed), flows
    path = Path(args.data)
    if not path.exists():
        raise CliError(f"data path does not exist: {path}")
    if path.is_dir():
        missing = [n for n in SPLIT_FILES.values() if not (path / n).exists()]
        if missing:
            raise CliError(f"{path} lacks split files {missing}")
        return tuple(Dataset.from_jsonl(path / SPLIT_FILES[s]) for s in SPLIT_FILES), None
    result = ingest_csv(path, _schema(args))
    return build_dataset(result.records, config, seed=seed,
                         provenance=Provenance.INGESTED), result.records


def _schema(args) -> SchemaConfig | None:
    cols = getattr(args, "columns", None)
    if not cols:
        return None
    try:
        mapping = json.loads(cols)
    except json.JSONDecodeError as exc:
        raise CliError(f"--columns is not valid JSON: {exc}") from None
    return SchemaConfig.from_mapping(mapping)


def _family_rows(splits):
    rows = []
    for ds in splits:
        counts = ds.family_counts()
        rows.append([ds.split.value] + [counts[f] for f in Family] + [len(ds)])
    return rows


def _metric_rows(names, reports):
    return [[name] + r.row() for name, r in zip(names, reports)]


# ----------------------------------------------------------------- commands

def cmd_data(args, seed, out: Path) -> dict:
    splits, flows = _load_splits(args, seed)
    for ds in splits:
        ds.to_jsonl(out / SPLIT_FILES[ds.split])
    if getattr(args, "flows", False) and flows is not None:
        flows_to_csv(flows, out / "flows.csv")
    header = ["split"] + [f.name for f in Family] + ["total"]
    rows = _family_rows(splits)
    _write(out / "splits.csv", _csv_text(header, rows))
    _write(out / "table.md", _md_table(header, rows))
    return {"flows": len(flows) if flows is not None else None,
            "windows": sum(len(ds) for ds in splits)}


def cmd_train_centralized(args, seed, out: Path) -> dict:
    (tr, val, te), _ = _load_splits(args, seed)
    cfg = _train_config(args, seed)
    model, metrics, timing = run_centralized((tr, val, te), args.model, cfg)
    header = ["Model"] + list(CSV_COLUMNS)
    rows = _metric_rows([args.model.upper()], [metrics])
    if args.kfold:
        reports, mean = kfold(Dataset.concat([tr, val]), args.kfold, args.model, cfg)
        fold_rows = _metric_rows([f"fold{i + 1}" for i in range(len(reports))] + ["mean"],
                                 reports + [mean])
        _write(out / "kfold.csv", _csv_text(["Fold"] + list(CSV_COLUMNS), fold_rows))
    _write(out / "metrics.csv", _csv_text(header, rows))
    _write(out / "table.md", _md_table(header, rows))
    _write(out / "timing.csv", _csv_text(["phase", "seconds"],
                                         [[k, f"{v:.6f}"] for k, v in timing.items()]))
    save_checkpoint(model, out / "model.ckpt")
    return {"accuracy": metrics.accuracy, "fnr": metrics.fnr}


def _fl_config(args, seed) -> FLConfig:
    values = {"rounds": args.rounds, "local_epochs": args.local_epochs,
              "learning_rate": args.learning_rate, "batch_size": args.batch_size,
              "workers": args.workers}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file does not exist: {path}")
        try:
            extra = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from None
        unknown = sorted(set(extra) - set(FL_CONFIG_KEYS))
        if unknown:
            raise CliError(f"{path}: unknown keys {unknown}")
        values.update(extra)
    # centralized-style epochs do not apply to federated runs
    values.pop("epochs", None)
    train_cfg = TrainConfig(values["learning_rate"], values["local_epochs"],
                            values["batch_size"], seed)
    return FLConfig(CASES[args.case].num_clients, values["rounds"], values["local_epochs"],
                    args.model, train_cfg, workers=values["workers"])


def cmd_train_federated(args, seed, out: Path) -> dict:
    (tr, val, te), _ = _load_splits(args, seed)
    scenario = CASES[args.case]
    clients = partition(tr, scenario, seed)
    test = scenario_test_set(val, te, scenario)
    fl_cfg = _fl_config(args, seed)
    t0 = time.perf_counter()
    model, logs = run_federated(fl_cfg, clients, test)
    elapsed = time.perf_counter() - t0
    final = logs[-1].metrics
    header = ["Model"] + list(CSV_COLUMNS)
    rows = _metric_rows([f"{args.model.upper()} (CASE {args.case})"], [final])
    _write(out / "metrics.csv", _csv_text(header, rows))
    _write(out / "table.md", _md_table(header, rows))
    _write(out / "rounds.csv", _csv_text(
        ["Round", "Samples"] + list(CSV_COLUMNS),
        [[lg.round + 1, lg.n] + lg.metrics.row() for lg in logs]))
    _write(out / "clients.csv", _csv_text(
        ["Client"] + [f.name for f in Family] + ["total"],
        [[f"Client{i + 1}"] + [c.family_counts()[f] for f in Family] + [len(c)]
         for i, c in enumerate(clients)]))
    _write(out / "timing.csv", _csv_text(
        ["round", "train_seconds", "aggregate_seconds", "evaluate_seconds"],
        [[lg.round + 1, f"{lg.train_seconds:.6f}", f"{lg.aggregate_seconds:.6f}",
          f"{lg.evaluate_seconds:.6f}"] for lg in logs] + [["total", f"{elapsed:.6f}", "", ""]]))
    save_checkpoint(model, out / "model.ckpt")
    return {"accuracy": final.accuracy, "fnr": final.fnr}


def cmd_eval_cross(args, seed, out: Path) -> dict:
    (tr, val, te), _ = _load_splits(args, seed)
    scenario = CASES[args.case]
    clients = partition(tr, scenario, seed)
    test = scenario_test_set(val, te, scenario)
    rows = cross_evaluate(clients, test, args.model, _train_config(args, seed))
    header = ["Trained on", "Tested on"] + list(CSV_COLUMNS)
    table = [[r.train_client, r.eval_set] + r.metrics.row() for r in rows]
    _write(out / "metrics.csv", _csv_text(header, table))
    _write(out / "table.md", _md_table(header, table))
    return {"rows": len(rows)}


def _parse_infections(specs, topo: Topology):
    if not specs:
        return [(topo.devices[0].id, Family.RW_WC)]
    out = []
    for s in specs:
        dev, sep, fam = s.rpartition(":")
        if not sep or not dev:
            raise CliError(f"--infect expects DEVICE:FAMILY, got {s!r}")
        out.append((dev, fam))
    return out


def cmd_simulate(args, seed, out: Path) -> dict:
    topo = Topology.load(args.topology) if args.topology else \
        default_topology(args.hospitals, args.devices)
    cfg = SimConfig(args.ticks, args.p, _parse_infections(args.infect, topo),
                    args.fl_period, args.detection_window, seed,
                    detection=not args.no_detection, tick_seconds=float(args.window))
    if args.learner == "oracle" or args.no_detection:
        learner = OracleLearner()
    else:
        (tr, _val, _te), _ = _load_splits(args, seed)
        scenario = CASES[args.case]
        train_cfg = TrainConfig(args.learning_rate, 1, args.batch_size, seed)
        learner = FederatedLearner(partition(tr, scenario, seed),
                                   FLConfig(scenario.num_clients, 1, 1, args.model, train_cfg))
    report = run(topo, cfg, learner)
    _write(out / "topology.json", json.dumps(topo.to_dict(), indent=2) + "\n")
    _write(out / "events.json", report.to_json())
    _write(out / "summary.csv", report.summary_csv())
    return {"final_counts": report.final_counts,
            "time_to_containment": report.time_to_containment}


def cmd_report(args, seed, out: Path) -> dict:
    (tr, val, te), _ = _load_splits(args, seed)
    scenario = CASES[args.case]
    clients = partition(tr, scenario, seed)
    test = scenario_test_set(val, te, scenario)
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    bad = [k for k in kinds if k not in MODEL_KINDS]
    if bad or not kinds:
        raise CliError(f"--models must list kinds from {MODEL_KINDS}, got {args.models!r}")
    cfg = _train_config(args, seed)
    results = [compare_overhead(tr, clients, test, k, cfg, rounds=args.rounds) for k in kinds]
    header = ["Model", "Centralized seconds", "Federated seconds", "FL/centralized ratio"]
    rows = [[r["model"].upper(), f"{r['centralized_seconds']:.6f}",
             f"{r['federated_seconds']:.6f}", f"{r['ratio']:.3f}"] for r in results]
    _write(out / "timing.csv", _csv_text(header, rows))
    _write(out / "table.md", _md_table(header, rows))
    acc_header = ["Model", "Centralized accuracy", "Federated accuracy"]
    acc_rows = [[r["model"].upper(), f"{r['centralized_accuracy']:.6f}",
                 f"{r['federated_accuracy']:.6f}"] for r in results]
    _write(out / "metrics.csv", _csv_text(acc_header, acc_rows))
    return {"ratios": {r["model"]: r["ratio"] for r in results}}


COMMANDS = {
    "data-synth": cmd_data,
    "data-ingest": cmd_data,
    "train-centralized": cmd_train_centralized,
    "train-federated": cmd_train_federated,
    "eval-cross": cmd_eval_cross,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate-policy":
            policies = validate_file(args.path)
            print(f"{args.path}: {len(policies)} valid policies")
            return 0
        if args.command == "data-ingest" and args.data == "synthetic":
            raise CliError("data-ingest needs --data pointing at a flow CSV")
        seed = _resolve_seed(args)
        out = _out_dir(args)
        record = _experiment_record(args)
        record["seed"] = seed
        record["backend"] = _accel.BACKEND
        if args.command == "train-federated":
            record["fl_config"] = dataclasses.asdict(_fl_config(args, seed))
        _write(out / "experiment.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
        summary = COMMANDS[args.command](args, seed, out)
        print(json.dumps({"command": args.command, "out": str(out), **summary},
                         default=str, sort_keys=True))
        return 0
    except (FedDiceError, CliError, OSError, ValueError, KeyError) as exc:
        print(f"feddice {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
