"""Command-line interface.

Subcommands::

    igcl synth  --out DIR             generate and save a synthetic dataset
    igcl graph  --out DIR             build the information graph of a regime
    igcl train  --regime R --method M train one regime, write its report
    igcl sweep  --out DIR             run the full method x regime grid
    igcl report DIR                   summarize the reports under DIR

Every command reads an experiment config (``--config``, JSON; the built-in
reference benchmark when omitted).  ``--seed`` replaces every seed in
the config.  Failures print one JSON line on stderr,
``{"error": ..., "type": ..., "command": ...}``, and exit nonzero: 2 for
bad usage or configuration, 1 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigurationError
from .experiment import (
    DEFAULT_GRID,
    METHODS,
    REGIMES,
    ExperimentConfig,
    RegimeSpec,
    export_report,
    export_sweep,
    load_config,
    load_report,
    prepare_data,
    reference_benchmark,
    run_regime,
    run_sweep,
)
from .infograph import add_annotation_anchors, build_info_graph, write_edge_list
from .siggen import Segment, StreamId, load_dataset, save_dataset, synth_dataset

log = logging.getLogger("igcl")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else reference_benchmark()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigurationError("--seed must be non-negative")
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
        cfg.split = dataclasses.replace(cfg.split, seed=args.seed)
    if getattr(args, "repeats", None) is not None:
        cfg.repeats = args.repeats
    if getattr(args, "jobs", None) is not None:
        cfg.n_jobs = args.jobs
    cfg.synth.validate()
    return cfg


def _streams(args, cfg):
    if getattr(args, "data", None):
        streams, _ = load_dataset(args.data)
        return streams
    return synth_dataset(cfg.synth)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


def cmd_synth(args) -> dict:
    cfg = _load(args)
    streams = synth_dataset(cfg.synth)
    save_dataset(streams, args.out, cfg.synth)
    return {"out": str(args.out), "n_streams": len(streams), "n_events": len(streams[0].event_log),
            "duration_s": streams[0].duration}


def cmd_graph(args) -> dict:
    cfg = _load(args)
    spec = RegimeSpec(args.regime, "ig_anchor" if args.method == "xe" else args.method, args.station, 1)
    data = prepare_data(_streams(args, cfg), cfg)
    pre = data.pretrain
    segments = [Segment(i, StreamId(int(pre.station[i]), int(pre.channel[i])), float(pre.interval[i, 0]),
                        float(pre.interval[i, 1]), np.empty(0)) for i in range(len(pre))]
    g = build_info_graph(segments, spec.system_context)
    stations = [spec.station if spec.station is not None else 0] if spec.one_station else range(data.n_stations)
    labeled = [(i, int(pre.y[i])) for i in np.flatnonzero(np.isin(pre.station, list(stations)))]
    g = add_annotation_anchors(g, labeled, data.n_classes)
    out = Path(args.out)
    write_edge_list(g, out / "edges.txt")
    stats = {"regime": spec.regime, "stations": list(stations), **g.stats()}
    _write_json(out / "graph.json", stats)
    return stats


def cmd_train(args) -> dict:
    cfg = _load(args)
    spec = RegimeSpec(args.regime, args.method, args.station, cfg.repeats)
    report = run_regime(spec, prepare_data(_streams(args, cfg), cfg), cfg)
    out = Path(args.out) if args.out else Path("runs") / spec.name
    export_report(report, out)
    return {"out": str(out), "name": spec.name, "mean": report.mean, "std": report.std}


def cmd_sweep(args) -> dict:
    cfg = _load(args)
    grid = DEFAULT_GRID
    if args.method or args.regime:
        grid = tuple((m, r) for m, r in grid if (not args.method or m == args.method)
                     and (not args.regime or r == args.regime))
        if not grid:
            raise ConfigurationError("no grid entry matches --method/--regime")
    reports = run_sweep(cfg, prepare_data(_streams(args, cfg), cfg), grid)
    out = Path(args.out) if args.out else Path("runs") / "sweep"
    export_sweep(reports, out)
    return {"out": str(out), "runs": {k: {"mean": r.mean, "std": r.std} for k, r in reports.items()}}


def cmd_report(args) -> dict:
    root = Path(args.path)
    files = sorted(root.glob("*/report.json")) or sorted(root.glob("report.json"))
    if not files:
        raise ConfigurationError(f"no report.json under {root}")
    rows = []
    for f in files:
        r = load_report(f)
        rows.append({"method": r.method, "regime": r.regime, "mean": r.mean, "std": r.std,
                     "n_runs": sum(len(a) for a in r.accuracies)})
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    table: dict = {}
    for row in rows:
        table.setdefault(row["method"], {})[row["regime"]] = {"mean": row["mean"], "std": row["std"]}
    _write_json(out / "summary.json", table)
    for row in rows:
        print(f"{row['method']:<10} {row['regime']:<15} {row['mean']:6.2f} +- {row['std']:5.2f}  (n={row['n_runs']})")
    return {"out": str(out), "n_reports": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="replace every seed in the config")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    regime = _Parser(add_help=False)
    regime.add_argument("--regime", choices=REGIMES, default="one_station_sc")
    regime.add_argument("--method", choices=METHODS, default="ig_anchor")
    regime.add_argument("--station", type=int, help="station index for one-station regimes (default: all)")
    regime.add_argument("--data", type=Path, help="dataset directory written by `synth` (default: regenerate)")

    p = _Parser(prog="igcl", description="Information-graph contrastive learning on synthetic seismic data.")
    p.add_argument("--version", action="version", version=f"igcl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.set_defaults(func=cmd_synth, need_out=True)

    s = sub.add_parser("graph", parents=[common, regime], help="build and export an information graph")
    s.set_defaults(func=cmd_graph, need_out=True)

    s = sub.add_parser("train", parents=[common, regime], help="train one regime")
    s.add_argument("--repeats", type=int)
    s.add_argument("--jobs", type=int, help="worker processes")
    s.set_defaults(func=cmd_train, need_out=False)

    s = sub.add_parser("sweep", parents=[common], help="run the method x regime grid")
    s.add_argument("--regime", choices=REGIMES, help="restrict the grid to one regime")
    s.add_argument("--method", choices=METHODS, help="restrict the grid to one method")
    s.add_argument("--station", type=int, help=argparse.SUPPRESS)
    s.add_argument("--data", type=Path, help="dataset directory written by `synth`")
    s.add_argument("--repeats", type=int)
    s.add_argument("--jobs", type=int, help="worker processes")
    s.set_defaults(func=cmd_sweep, need_out=False)

    s = sub.add_parser("report", parents=[common], help="summarize exported reports")
    s.add_argument("path", type=Path, help="a sweep directory or a single report directory")
    s.set_defaults(func=cmd_report, need_out=False)
    return p


def _fail(command: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": command}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = argv[0] if argv and not argv[0].startswith("-") else ""
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.need_out and args.out is None:
            raise ConfigurationError(f"{command} requires --out")
        if getattr(args, "station", None) is not None and command == "sweep":
            raise ConfigurationError("--station is not accepted by sweep; use train")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        result = args.func(args)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (ConfigurationError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(command, exc, EXIT_USAGE)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail(command, exc, EXIT_FAILURE)
    print(json.dumps({"status": "ok", "command": command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
