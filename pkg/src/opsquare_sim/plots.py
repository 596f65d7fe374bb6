"""Render plot files from a run directory's CSV tables.

Deliberately self-contained: only the exported CSVs are read, never the
in-memory run, so plots can be regenerated for any archived run
directory. Empty tables are skipped, so one entry point serves sweep,
reconfiguration and balancing runs alike.
"""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 (backend must be set first)

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def _read(out_dir: str, name: str) -> list[dict]:
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _slice_label(row: dict) -> str:
    return f"slice {row['slice']} (p{row['priority']})"


def _save(fig, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_sweep(out_dir: str) -> list[str]:
    """Loss-vs-load and latency-vs-load curves, one line per slice."""
    rows = _read(out_dir, "sweep.csv")
    if not rows:
        return []
    slices = sorted({r["slice"] for r in rows}, key=int)
    written = []
    for metric, ylabel, name in (
            ("loss_ratio", "loss ratio", "sweep_loss.png"),
            ("mean_latency_us", "mean latency (us)", "sweep_latency.png")):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for i, s in enumerate(slices):
            pts = sorted((float(r["load"]), float(r[metric]))
                         for r in rows if r["slice"] == s)
            label = _slice_label(next(r for r in rows if r["slice"] == s))
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", ms=3.5, color=_COLORS[i % len(_COLORS)],
                    label=label)
        ax.set_xlabel("offered load (fraction of server rate)")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend()
        written.append(_save(fig, out_dir, name))
    return written


def plot_cdf(out_dir: str) -> list[str]:
    """Latency CDF per slice, one linestyle per sampled load."""
    rows = _read(out_dir, "cdf.csv")
    if not rows:
        return []
    slices = sorted({r["slice"] for r in rows}, key=int)
    loads = sorted({float(r["load"]) for r in rows})
    styles = ["-", "--", ":", "-."]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, s in enumerate(slices):
        for j, load in enumerate(loads):
            pts = [(float(r["latency_us"]), float(r["quantile"]))
                   for r in rows
                   if r["slice"] == s and float(r["load"]) == load]
            if not pts:
                continue
            suffix = f" @ load {load:g}" if len(loads) > 1 else ""
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    styles[j % len(styles)],
                    color=_COLORS[i % len(_COLORS)],
                    label=f"slice {s}{suffix}")
    ax.set_xlabel("latency (us)")
    ax.set_ylabel("cumulative fraction")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend()
    return [_save(fig, out_dir, "latency_cdf.png")]


def plot_timeseries(out_dir: str) -> list[str]:
    """Windowed loss and latency over time, one color per run arm.

    Control-plane reconfiguration and rebalance instants appear as
    dashed vertical lines.
    """
    rows = _read(out_dir, "timeseries.csv")
    if not rows:
        return []
    runs = sorted({r["run"] for r in rows})
    color = {run: _COLORS[i % len(_COLORS)] for i, run in enumerate(runs)}
    marks = [(r["run"], float(r["rel_ms"]))
             for r in _read(out_dir, "events.csv")
             if r["kind"] in ("rebalanced", "reconfigured")]
    fig, (ax_loss, ax_lat) = plt.subplots(
        2, 1, figsize=(6.5, 5.6), sharex=True)
    for run in runs:
        labeled = False
        seeds = sorted({r["seed"] for r in rows if r["run"] == run})
        for seed in seeds:
            pts = sorted((float(r["rel_ms"]), float(r["window_loss_ratio"]),
                          float(r["window_latency_us"]))
                         for r in rows
                         if r["run"] == run and r["seed"] == seed)
            xs = [p[0] for p in pts]
            ax_loss.plot(xs, [p[1] for p in pts], color=color[run],
                         alpha=0.75, label=run if not labeled else None)
            ax_lat.plot(xs, [p[2] for p in pts], color=color[run], alpha=0.75)
            labeled = True
    for run, rel in dict.fromkeys(marks):  # dedup, keep order
        for ax in (ax_loss, ax_lat):
            ax.axvline(rel, color=color.get(run, "gray"),
                       linestyle="--", alpha=0.6, lw=1.0)
    ax_loss.set_ylabel("windowed loss ratio")
    ax_lat.set_ylabel("windowed latency (us)")
    ax_lat.set_xlabel("time since traffic start (ms)")
    for ax in (ax_loss, ax_lat):
        ax.grid(True, alpha=0.3)
    ax_loss.legend()
    return [_save(fig, out_dir, "timeseries.png")]


def render_plots(out_dir: str) -> list[str]:
    """Render every plot the directory's tables support; returns paths."""
    return plot_sweep(out_dir) + plot_cdf(out_dir) + plot_timeseries(out_dir)
