"""Command-line entry point.

Three subcommands: `run` executes a scenario file and writes the CSV
tables, plots and manifest to an output directory; `validate` prints
every configuration diagnostic without simulating anything; `report`
summarizes a finished run directory. Exit codes: 0 ok, 1 the scenario
failed to run or artifacts are missing, 2 the configuration is invalid.

Scenario arguments take a file path or the bare name of a bundled
scenario (fig5, fig7, fig9).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources

import yaml

from . import __version__
from .errors import ConfigError
from .runner import CSV_FILES, export, run_scenario
from .scenario import bundled_names, parse_scenario

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_BAD_CONFIG = 2


def _read_scenario(path: str):
    """Parse a scenario argument; returns (Scenario or None, diagnostics)."""
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    else:
        stem = os.path.basename(path)
        if stem.endswith(".scenario"):
            stem = stem[:-len(".scenario")]
        if os.sep in path or stem not in bundled_names():
            raise ConfigError(f"no such scenario file: {path}")
        ref = resources.files("opsquare_sim") / "scenarios" / f"{stem}.scenario"
        raw = yaml.safe_load(ref.read_text(encoding="utf-8"))
    return parse_scenario(raw)


def _print_diags(diags) -> int:
    for d in diags:
        print(f"error: {d}", file=sys.stderr)
    return EXIT_BAD_CONFIG


def cmd_run(args) -> int:
    scenario, diags = _read_scenario(args.file)
    if diags:
        return _print_diags(diags)
    seeds = (args.seed,) if args.seed is not None else scenario.seeds
    out = args.out or os.path.join("runs", scenario.name)
    print(f"running {scenario.name}: {scenario.experiment.kind}, "
          f"{len(scenario.slices)} slices, seeds {list(seeds)}")
    result = run_scenario(scenario, seeds=seeds)
    digests = export(result, out)
    from .plots import render_plots  # defer: pulls in matplotlib
    plots = [os.path.basename(p) for p in render_plots(out)]
    names = sorted(digests) + ["manifest.json"] + sorted(plots)
    print(f"wrote {out}{os.sep}" + ", ".join(names))
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario, diags = _read_scenario(args.file)
    if diags:
        return _print_diags(diags)
    print(f"ok: {scenario.name} ({scenario.experiment.kind}, "
          f"{len(scenario.slices)} slices, seeds {list(scenario.seeds)})")
    return EXIT_OK


def _read_table(run_dir: str, name: str) -> list[dict]:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _print_rows(header, rows):
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    for line in ([header] + rows):
        print("  " + "  ".join(c.rjust(w) for c, w in zip(line, widths)))


def cmd_report(args) -> int:
    run_dir = args.dir
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        print(f"error: {run_dir}: not a run directory (no manifest.json)",
              file=sys.stderr)
        return EXIT_RUN_FAILED
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    print(f"run manifest: version {manifest['version']}, "
          f"config {manifest['config_sha256'][:12]}, "
          f"seeds {manifest['seeds']}")

    sweep = _read_table(run_dir, "sweep.csv")
    if sweep:
        print(f"\nper-slice results over {len({r['load'] for r in sweep})} "
              "loads (pooled across seeds):")
        header = ["load", "slice", "priority", "generated", "loss_ratio",
                  "mean_latency_us", "p99_latency_us"]
        _print_rows(header, [[r[h] for h in header] for r in sweep])
    else:
        summary = _read_table(run_dir, "summary.csv")
        if not summary:
            print(f"error: {run_dir}: no result tables", file=sys.stderr)
            return EXIT_RUN_FAILED
        print("\nper-run slice results:")
        header = ["run", "seed", "slice", "priority", "generated",
                  "delivered", "loss_ratio", "mean_latency_us"]
        _print_rows(header, [[r[h] for h in header] for r in summary])

    events = _read_table(run_dir, "events.csv")
    if events:
        print("\ncontrol-plane events:")
        grouped: dict = {}
        for r in events:
            key = (r["run"], r["t_ms"], r["rel_ms"], r["kind"], r["detail"])
            grouped[key] = grouped.get(key, 0) + 1
        for (run, t_ms, rel_ms, kind, detail), n in grouped.items():
            print(f"  [{run} t={t_ms}ms rel={rel_ms}ms] {kind} {detail}"
                  + (f"  (x{n} seeds)" if n > 1 else ""))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opsquare-sim",
        description="Slice-aware optical data center network simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario and export results")
    p_run.add_argument("file", help="scenario file or bundled scenario name")
    p_run.add_argument("--seed", type=int, default=None,
                       help="run only this seed instead of the scenario's list")
    p_run.add_argument("--out", default=None,
                       help="output directory (default: runs/<scenario name>)")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario without running")
    p_val.add_argument("file", help="scenario file or bundled scenario name")
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("dir", help="output directory of a previous run")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except Exception as exc:  # scenario execution / IO failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
