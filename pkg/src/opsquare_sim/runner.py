"""Experiment execution: build a fabric from a scenario, run it, export.

A scenario expands into one or more runs: one per (seed, load point) for
sweeps, one per (seed, arm) for reconfiguration and balancing
experiments, where the paired arm repeats the run with the action
disabled. Every run provisions all slices first with generation off;
traffic starts at a common barrier once the last slice turns active, so
paired arms see byte-identical source streams. Summary numbers come
from the engine's exact per-slice accounting, the time series from the
controller's statistics windows plus engine snapshots the runner takes
at the same polling instants.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from random import Random

from . import __version__
from .controlplane import QoS, SliceSpec, wire
from .dataplane import Engine
from .errors import ConfigError
from .metrics import Reservoir, fmt, sha256_file, write_csv, write_manifest
from .scenario import Scenario
from .traffic import FrameSource

MS = 1_000_000

SUMMARY_HEADER = ["run", "seed", "load", "slice", "priority", "generated",
                  "delivered", "lost_overflow", "lost_no_route",
                  "retransmitted", "pending", "loss_ratio",
                  "mean_latency_us"]
SWEEP_HEADER = ["load", "slice", "priority", "generated", "delivered",
                "lost_overflow", "lost_no_route", "loss_ratio",
                "mean_latency_us", "p99_latency_us"]
CDF_HEADER = ["load", "slice", "quantile", "latency_us"]
TIMESERIES_HEADER = ["run", "seed", "t_ms", "rel_ms", "slice",
                     "window_sent", "window_lost", "window_retransmitted",
                     "window_loss_ratio", "window_latency_us",
                     "cum_generated", "cum_delivered", "cum_lost_overflow",
                     "cum_lost_no_route", "cum_loss_ratio",
                     "cum_latency_us"]
EVENTS_HEADER = ["run", "seed", "t_ms", "rel_ms", "kind", "detail"]

CSV_FILES = ("summary.csv", "sweep.csv", "cdf.csv", "timeseries.csv",
             "events.csv")


def derive_rng(*parts) -> Random:
    """Independent deterministic stream named by the given parts.

    Hash-based so streams never depend on construction order, and free
    of interpreter hash randomization.
    """
    tag = "/".join(str(p) for p in parts).encode()
    return Random(int.from_bytes(hashlib.sha256(tag).digest()[:8], "big"))


@dataclass
class RunHandle:
    """One live simulation plus everything the exporter needs."""

    label: str
    seed: int
    load: float
    engine: object
    ctrl: object
    barrier_ns: int | None = None
    cum_samples: dict = field(default_factory=dict)  # t_ns -> {slice: totals}

    @property
    def clock(self):
        return self.engine.clock


def build_run(scenario: Scenario, load: float, seed: int, label: str,
              balance_enabled: bool, on_barrier=None,
              reservoirs: dict | None = None) -> RunHandle:
    """Wire a fabric, provision every slice, and arm the traffic barrier.

    on_barrier(handle) runs at the instant the last slice turns active,
    right after the frame sources are registered.
    """
    grid = scenario.grid()
    engine = Engine(grid, scenario.dataplane)
    params = replace(scenario.control, balance_enabled=balance_enabled)
    ctrl = wire(engine, params)
    ctrl.discover_topology()
    ctrl.check_topology_view()
    handle = RunHandle(label, seed, load, engine, ctrl)
    if reservoirs:
        engine.reservoirs.update(reservoirs)

    waiting = {s.slice_id for s in scenario.slices}

    def active(state):
        waiting.discard(state.spec.slice_id)
        if waiting:
            return
        handle.barrier_ns = engine.clock.now
        _start_sources(scenario, handle)
        if on_barrier is not None:
            on_barrier(handle)

    for sdef in sorted(scenario.slices, key=lambda s: s.slice_id):
        spec = SliceSpec(
            sdef.slice_id,
            tuple((grid.tor_at(r), 1) for r in sdef.racks),
            sdef.priority,
            QoS(sdef.loss_threshold, sdef.latency_target_us * 1000.0),
            sdef.wavelength)
        ctrl.provision_slice(spec, on_active=active)
    return handle


def _start_sources(scenario: Scenario, handle: RunHandle):
    nspb = scenario.topology.ns_per_byte
    start = handle.barrier_ns
    for sdef in scenario.slices:
        for j, flow in enumerate(sdef.flows):
            burst = flow.burst_frames if flow.burst_frames is not None \
                else sdef.burst_frames
            rng = derive_rng(handle.seed, "traffic", sdef.slice_id, j)
            handle.engine.sources.append(FrameSource(
                handle.engine.tors[flow.src], sdef.slice_id, flow.src,
                flow.dsts, handle.load * flow.load_factor, nspb, rng,
                burst_frames=burst, start_ns=start))


def run_to_barrier(handle: RunHandle, step_ms: int = 2,
                   give_up_ms: int = 5_000):
    """Advance the idle fabric until every slice is provisioned.

    The clock ends at most one step past the barrier; the fabric is
    idle until then, so the steps fast-forward and cost almost nothing.
    """
    engine = handle.engine
    step = max(engine.slot_ns,
               (step_ms * MS // engine.slot_ns) * engine.slot_ns)
    deadline = engine.clock.now + give_up_ms * MS
    while handle.barrier_ns is None:
        if engine.clock.now >= deadline:
            raise ConfigError("provisioning did not complete; check events")
        engine.run_until(engine.clock.now + step)


def align_slot(t_ns: int, slot_ns: int) -> int:
    """Round up to the next slot boundary."""
    return -(-t_ns // slot_ns) * slot_ns


def _start_cum_sampler(handle: RunHandle, period_ns: int):
    """Snapshot exact per-slice totals at every statistics instant."""
    engine = handle.engine

    def sample():
        handle.cum_samples[engine.clock.now] = engine.slice_totals()
        engine.clock.schedule(engine.clock.now + period_ns, sample)

    engine.clock.schedule(engine.clock.now + period_ns, sample)


def _retransmitted(engine) -> dict:
    out: dict = {}
    for sw in engine.switches.values():
        for s, v in sw.nack_contention.items():
            out[s] = out.get(s, 0) + v
    return out


def _summary_rows(scenario: Scenario, handle: RunHandle) -> list:
    totals = handle.engine.slice_totals()
    retx = _retransmitted(handle.engine)
    rows = []
    for sdef in sorted(scenario.slices, key=lambda s: s.slice_id):
        t = totals.get(sdef.slice_id)
        if t is None:
            t = dict.fromkeys(("generated", "delivered", "lost_overflow",
                               "lost_no_route", "buffered", "inflight",
                               "lat_sum", "lat_cnt"), 0)
        lost = t["lost_overflow"] + t["lost_no_route"]
        mean_us = t["lat_sum"] / t["lat_cnt"] / 1000.0 if t["lat_cnt"] else 0.0
        rows.append((handle.label, handle.seed, handle.load, sdef.slice_id,
                     sdef.priority, t["generated"], t["delivered"],
                     t["lost_overflow"], t["lost_no_route"],
                     retx.get(sdef.slice_id, 0),
                     t["buffered"] + t["inflight"],
                     lost / t["generated"] if t["generated"] else 0.0,
                     mean_us))
    return rows


def _timeseries_rows(scenario: Scenario, handle: RunHandle) -> list:
    rows = []
    barrier = handle.barrier_ns or 0
    for m in handle.ctrl.metrics:
        cum = handle.cum_samples.get(m.t_ns, {}).get(m.slice_id)
        if cum is None:
            cum = dict.fromkeys(("generated", "delivered", "lost_overflow",
                                 "lost_no_route", "lat_sum", "lat_cnt"), 0)
        cum_lost = cum["lost_overflow"] + cum["lost_no_route"]
        cum_lat = cum["lat_sum"] / cum["lat_cnt"] / 1000.0 \
            if cum["lat_cnt"] else 0.0
        rows.append((handle.label, handle.seed, m.t_ns / 1e6,
                     (m.t_ns - barrier) / 1e6, m.slice_id,
                     m.sent, m.lost, m.retransmitted, m.loss_ratio,
                     m.mean_latency_ns / 1000.0,
                     cum["generated"], cum["delivered"],
                     cum["lost_overflow"], cum["lost_no_route"],
                     cum_lost / cum["generated"] if cum["generated"] else 0.0,
                     cum_lat))
    return rows


def _event_rows(handle: RunHandle) -> list:
    barrier = handle.barrier_ns or 0
    return [(handle.label, handle.seed, t / 1e6, (t - barrier) / 1e6,
             kind, detail)
            for t, kind, detail in handle.ctrl.events]


@dataclass
class RunResult:
    """Everything a finished scenario produced, before export."""

    scenario: Scenario
    seeds: tuple
    summary: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    cdf: list = field(default_factory=list)
    timeseries: list = field(default_factory=list)
    events: list = field(default_factory=list)
    handles: list = field(default_factory=list)


def run_scenario(scenario: Scenario, seeds=None) -> RunResult:
    """Execute every run the scenario describes; no files touched."""
    seeds = tuple(seeds) if seeds else scenario.seeds
    result = RunResult(scenario, seeds)
    kind = scenario.experiment.kind
    if kind == "sweep":
        _run_sweep(scenario, seeds, result)
    elif kind == "reconfigure":
        _run_timeline(scenario, seeds, result, reconfigure=True)
    else:
        _run_timeline(scenario, seeds, result, reconfigure=False)
    return result


def _gen_window_ns(scenario: Scenario, load: float) -> int:
    """Generation horizon that yields ~frames_per_point frames."""
    mean_frame = (64 + 1518) / 2
    nspb = scenario.topology.ns_per_byte
    rate = sum(load * f.load_factor
               for s in scenario.slices for f in s.flows)
    if rate <= 0:
        raise ConfigError("scenario offers no traffic")
    frames_per_ns = rate / (mean_frame * nspb)
    return int(scenario.experiment.frames_per_point / frames_per_ns)


def _run_sweep(scenario: Scenario, seeds, result: RunResult):
    exp = scenario.experiment
    slice_ids = sorted(s.slice_id for s in scenario.slices)
    priorities = {s.slice_id: s.priority for s in scenario.slices}
    for load in exp.loads:
        label = f"load-{fmt(load)}"
        pooled: dict = {s: dict.fromkeys(
            ("generated", "delivered", "lost_overflow", "lost_no_route",
             "lat_sum", "lat_cnt"), 0) for s in slice_ids}
        reservoirs = None
        if load in exp.cdf_loads:
            reservoirs = {s: Reservoir(scenario.reservoir_samples,
                                       derive_rng("reservoir", load, s))
                          for s in slice_ids}
        for seed in seeds:
            handle = build_run(scenario, load, seed, label,
                               balance_enabled=False, reservoirs=reservoirs)
            run_to_barrier(handle)
            engine = handle.engine
            gen_end = max(handle.barrier_ns + _gen_window_ns(scenario, load),
                          engine.clock.now)
            engine.run_until(align_slot(gen_end, engine.slot_ns),
                             generate_until_ns=gen_end)
            engine.drain()
            engine.audit_conservation()
            result.summary.extend(_summary_rows(scenario, handle))
            result.events.extend(_event_rows(handle))
            for s, t in engine.slice_totals().items():
                for k in pooled[s]:
                    pooled[s][k] += t[k]
            result.handles.append(handle)
        for s in slice_ids:
            t = pooled[s]
            lost = t["lost_overflow"] + t["lost_no_route"]
            mean_us = t["lat_sum"] / t["lat_cnt"] / 1000.0 \
                if t["lat_cnt"] else 0.0
            p99 = 0.0
            if reservoirs is not None and len(reservoirs[s]):
                grid = reservoirs[s].quantile_grid(100)
                p99 = grid[99][1] / 1000.0
                result.cdf.extend(
                    (load, s, q, v / 1000.0)
                    for q, v in reservoirs[s].quantile_grid(200))
            result.sweep.append((
                load, s, priorities[s], t["generated"], t["delivered"],
                t["lost_overflow"], t["lost_no_route"],
                lost / t["generated"] if t["generated"] else 0.0,
                mean_us, p99))


def _run_timeline(scenario: Scenario, seeds, result: RunResult,
                  reconfigure: bool):
    """Fixed-load run with statistics polling; paired arm optional."""
    exp = scenario.experiment
    arms = [("reconfigured", True)] if reconfigure else [("balanced", True)]
    if exp.paired_baseline:
        arms.append(("baseline", False) if reconfigure
                    else ("frozen", False))
    period = scenario.control.stats_period_ns
    for seed in seeds:
        for label, act in arms:
            balance = (not reconfigure) and act

            def on_barrier(handle, _act=act):
                handle.ctrl.start_stats(period)
                _start_cum_sampler(handle, period)
                if reconfigure and _act:
                    at = handle.barrier_ns + int(exp.at_ms * MS)
                    grid = handle.engine.grid
                    handle.clock.schedule(
                        at, handle.ctrl.reconfigure_slice, exp.slice,
                        [grid.tor_at(r) for r in exp.add_racks])

            handle = build_run(scenario, exp.load, seed, label,
                               balance_enabled=balance,
                               on_barrier=on_barrier)
            run_to_barrier(handle)
            engine = handle.engine
            end = max(handle.barrier_ns + int(exp.duration_ms * MS),
                      engine.clock.now)
            engine.run_until(align_slot(end, engine.slot_ns),
                             generate_until_ns=end)
            engine.audit_conservation()
            result.summary.extend(_summary_rows(scenario, handle))
            result.timeseries.extend(_timeseries_rows(scenario, handle))
            result.events.extend(_event_rows(handle))
            result.handles.append(handle)


def export(result: RunResult, out_dir) -> dict:
    """Write the CSV tables and the manifest; returns {file: sha256}."""
    os.makedirs(out_dir, exist_ok=True)
    tables = {
        "summary.csv": (SUMMARY_HEADER, result.summary),
        "sweep.csv": (SWEEP_HEADER, result.sweep),
        "cdf.csv": (CDF_HEADER, result.cdf),
        "timeseries.csv": (TIMESERIES_HEADER, result.timeseries),
        "events.csv": (EVENTS_HEADER, result.events),
    }
    digests = {}
    for name, (header, rows) in tables.items():
        path = os.path.join(out_dir, name)
        write_csv(path, header, rows)
        digests[name] = sha256_file(path)
    write_manifest(os.path.join(out_dir, "manifest.json"),
                   result.scenario.raw, list(result.seeds), __version__,
                   digests)
    return digests
