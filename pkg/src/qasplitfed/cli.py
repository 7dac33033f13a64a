"""Command line: single experiments and corruption sweeps.

Config files are INI. Keys of the ``[run]`` section are :class:`RunConfig`
field names (dashes or underscores). A ``[sweep]`` section may set
``strategies`` and ``corrupted`` (comma separated). Flags override the file.

    qasplitfed run --config exp.ini --strategy fedavg --corrupted 2 --out results
    qasplitfed sweep --config exp.ini --strategies naive,fedavg,qa-splitfed --out results
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import aggregation, metrics
from .errors import ConfigurationError, SplitFedError
from .orchestrator import RunConfig, RunResult, run

EXIT_CONFIG = 2
EXIT_RUNTIME = 1

_FLAGS = {   # flag dest -> RunConfig field
    "strategy": "strategy",
    "clients": "clients",
    "global_epochs": "global_epochs",
    "local_epochs": "local_epochs",
    "corrupted": "corrupted",
    "corrupt_ids": "corrupt_ids",
    "radius": "radius",
    "seed": "seed",
    "transport": "transport",
}


def read_config_file(path) -> tuple[dict, dict]:
    """``(run_values, sweep_values)`` from an INI file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in ("run", "sweep")]
    if unknown:
        raise ConfigurationError(f"{path}: unknown section [{unknown[0]}]")
    run_values = dict(parser["run"]) if parser.has_section("run") else {}
    sweep_values = dict(parser["sweep"]) if parser.has_section("sweep") else {}
    return run_values, sweep_values


def build_config(args) -> tuple[RunConfig, dict]:
    values, sweep = read_config_file(args.config) if args.config else ({}, {})
    for dest, name in _FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    return RunConfig.from_mapping(values), sweep


def output_dir(base, label: str) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    out = Path(base) / f"{stamp}-{label}"
    n = 1
    while out.exists():
        n += 1
        out = Path(base) / f"{stamp}-{label}-{n}"
    out.mkdir(parents=True)
    return out


def write_run_artifacts(directory: Path, config: RunConfig, result: RunResult) -> None:
    k = len(config.corrupted_ids())
    metrics.write_long_csv(directory / "report.csv", metrics.report_rows(config.strategy, k, result.report))
    result.log.write(directory / "training_log.jsonl")
    ckpt = directory / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    result.client.save(ckpt / "global_client.qpv")
    result.server.save(ckpt / "global_server.qpv")


def _label(config: RunConfig) -> str:
    return f"{config.strategy}-k{len(config.corrupted_ids())}-s{config.seed}"


def cmd_run(args) -> int:
    config, _ = build_config(args)
    out = output_dir(args.out, _label(config))
    result = run(config)
    write_run_artifacts(out, config, result)
    rep = result.report
    print(f"{config.strategy} k={len(config.corrupted_ids())}: loss {rep.loss:.4f} "
          f"accuracy {rep.accuracy:.4f} (best global epoch {result.best_epoch})", file=sys.stderr)
    print(out)
    return 0


def _split_list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _run_cell(config: RunConfig) -> RunResult:
    result = run(config)
    result.history = []
    return result


def cmd_sweep(args) -> int:
    base, sweep = build_config(args)
    strategies = _split_list(args.strategies or sweep.get("strategies", ",".join(aggregation.STRATEGIES)))
    for s in strategies:
        if s not in aggregation.STRATEGIES:
            raise ConfigurationError(f"sweep field 'strategies': unknown strategy {s!r}")
    ks_text = args.ks or sweep.get("corrupted")
    try:
        ks = [int(v) for v in _split_list(ks_text)] if ks_text else list(range(base.clients + 1))
    except ValueError as exc:
        raise ConfigurationError(f"sweep field 'corrupted': {ks_text!r} is not a list of integers") from exc
    cells = [RunConfig.from_mapping({**base.to_dict(), "strategy": s, "corrupted": k, "corrupt_ids": None})
             for s in strategies for k in ks]
    if base.corrupt_ids is not None:
        raise ConfigurationError("sweep field 'corrupt_ids': fixed ids conflict with sweeping the corrupted count")
    out = output_dir(args.out, f"sweep-s{base.seed}")
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = []
    cell_dir = out / "cells"
    for config, result in zip(cells, results):
        d = cell_dir / _label(config)
        d.mkdir(parents=True)
        write_run_artifacts(d, config, result)
        rows.append((config.strategy, len(config.corrupted_ids()), result.report))
        print(f"{config.strategy} k={rows[-1][1]}: accuracy {result.report.accuracy:.4f}", file=sys.stderr)
    metrics.write_table_csv(out / "table.csv", rows)
    for s in strategies:
        with open(out / f"accuracy_{s}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("k", "accuracy"))
            w.writerows((k, repr(rep.accuracy)) for st, k, rep in rows if st == s)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--strategy", choices=aggregation.STRATEGIES)
    common.add_argument("--clients", type=int)
    common.add_argument("--global-epochs", type=int)
    common.add_argument("--local-epochs", type=int)
    common.add_argument("--corrupted", type=int, help="number of corrupted clients")
    common.add_argument("--corrupt-ids", help="explicit corrupted client ids, comma separated")
    common.add_argument("--radius", type=int, help="dilation radius in pixels")
    common.add_argument("--seed", type=int)
    common.add_argument("--transport", choices=("inproc", "tcp"))
    common.add_argument("--out", default="results", help="base output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qasplitfed", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train once and write report, log and checkpoints")
    sw = sub.add_parser("sweep", parents=[common], help="run every (strategy, corrupted count) cell")
    sw.add_argument("--strategies", help="comma separated; default: all")
    sw.add_argument("--ks", help="corrupted counts, comma separated; default: 0..clients")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_run(args) if args.command == "run" else cmd_sweep(args)
    except (FileNotFoundError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SplitFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
