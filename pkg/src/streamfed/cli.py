"""Command-line entry point: ``streamfed <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .chain import load_blobs, load_ledger, replay
from .dataset import write_csv
from .forest import loads_forest, render_tree
from .harness import (
    ConfigError,
    ExperimentConfig,
    load_population,
    node_sweep,
    run_baseline,
    run_experiment,
    write_outputs,
    write_sweep_csv,
)


def _config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    patients = load_population(cfg)
    for p in patients:
        write_csv(p, out / f"{p.patient_id}.csv")
    print(f"wrote {len(patients)} patient files to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args.config)
    report, sim = run_experiment(cfg)
    out = write_outputs(report, sim, args.out or cfg.output_dir)
    print(f"clients ready: {len(report.client_forest_accuracy)}  dropped: {len(report.dropped)}")
    print(f"population forest accuracy: {report.population_mean:.4f} +/- {report.population_std:.4f}")
    if report.baseline:
        print(f"baseline ({report.baseline['streams']}): {report.baseline['accuracy']:.4f}")
    print(f"ledger entries: {report.ledger['entries']}  replay ok: {report.ledger['replay_ok']}")
    print(f"outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    result = node_sweep(cfg, args.max_nodes or cfg.sweep_max_nodes or 6)
    for k, acc in result.curve:
        print(f"{k:3d} nodes  accuracy {acc:.4f}")
    print(f"median single-node accuracy {result.median_single:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(asdict(result), out / "node_sweep.csv")
        (out / "node_sweep.json").write_text(
            json.dumps(asdict(result), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args.config)
    print(json.dumps(asdict(run_baseline(cfg)), indent=2, sort_keys=True))
    return 0


def _ledger_dir(path: str) -> Path:
    p = Path(path)
    return p / "ledger" if (p / "ledger" / "ledger.jsonl").exists() else p


def cmd_ledger(args) -> int:
    d = _ledger_dir(args.dir)
    entries = load_ledger(d / "ledger.jsonl")
    if args.action == "export":
        for e in entries:
            parts = [f"{e.seq:6d}", f"r{e.round}", e.kind.value]
            if e.subset:
                parts.append(e.subset)
            if e.sender:
                parts.append(f"from={e.sender}")
            if e.recipient:
                parts.append(f"to={e.recipient}")
            if e.digest:
                parts.append(f"digest={e.digest}")
            if e.n_samples is not None:
                parts.append(f"n={e.n_samples}")
            if e.subsets:
                parts.append("subsets=" + ",".join(e.subsets))
            if e.note:
                parts.append(f"note={e.note!r}")
            print(" ".join(parts))
        return 0
    report = replay(entries, load_blobs(d / "blobs"))
    if args.action == "verify":
        print(f"{report.n_entries} entries, {len(report.aggregates)} aggregates: "
              + ("OK" if report.ok else "FAILED"))
        for err in report.errors:
            print("  " + err)
        return 0 if report.ok else 1
    print(json.dumps(report.final_models, indent=2, sort_keys=True))
    return 0 if report.ok else 1


def cmd_inspect_forest(args) -> int:
    forest = loads_forest(Path(args.file).read_text(encoding="utf-8"))
    acc = None
    if args.accuracies:
        acc = json.loads(Path(args.accuracies).read_text(encoding="utf-8"))
        acc = acc.get("subset_model_accuracy", acc)
    indices = range(forest.n_trees) if args.all else [args.tree]
    for i in indices:
        print(render_tree(forest, i, acc))
    counts = forest.split_counts()
    print("split counts: " + ", ".join(f"{k}={v}" for k, v in counts.items() if v))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamfed", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic population as CSV files")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run a full experiment")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="node sweep: accuracy vs. nodes aggregated")
    p.add_argument("--config")
    p.add_argument("--max-nodes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("baseline", help="centralized full-feature baseline")
    p.add_argument("--config")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ledger", help="export, verify or replay a run's ledger")
    p.add_argument("action", choices=["export", "verify", "replay"])
    p.add_argument("dir", help="run output directory or its ledger/ subdirectory")
    p.set_defaults(func=cmd_ledger)

    p = sub.add_parser("inspect-forest", help="render a client's forest")
    p.add_argument("file")
    p.add_argument("--tree", type=int, default=0)
    p.add_argument("--all", action="store_true")
    p.add_argument("--accuracies", help="metrics.json whose subset accuracies annotate model columns")
    p.set_defaults(func=cmd_inspect_forest)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # output piped into e.g. head; silence the flush at exit too
        sys.stdout = open(os.devnull, "w")
        return 0


if __name__ == "__main__":
    sys.exit(main())
