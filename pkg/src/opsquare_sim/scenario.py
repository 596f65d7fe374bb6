"""Scenario files: the declarative description of one experiment.

A scenario is a YAML document with a versioned schema. It pins the
fabric dimensions, data-plane and control-plane parameters, the slices
with their traffic, and exactly one experiment section:

    schema: 1
    name: example
    topology:  {n_clusters: 2, racks_per_cluster: 4, servers_per_rack: 4}
    dataplane: {slot_ns: 1280, voq_capacity: 64}
    control:   {stats_period_ms: 25, cooldown_windows: 10}
    slices:
      - id: 1
        name: NS1
        priority: 1
        racks: [1, 8]
        burst_frames: 8
        flows:
          - {src: 1, dsts: {8: 1.0}}
          - {src: 8, dsts: {1: 1.0}}
    experiment:
      kind: sweep            # or reconfigure, balance
      loads: [0.1, 0.2]
      frames_per_point: 200000
      cdf_loads: [0.5]
    seeds: [1, 2, 3]

Traffic flows name a source rack and a destination weight table; each
flow is one server worth of offered load (the swept or fixed load times
the flow's load_factor). validate() returns diagnostics instead of
raising so the CLI can print them all at once; loading a scenario never
simulates anything.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import yaml

from .controlplane import ControlParams
from .dataplane import DataPlaneParams, PRIORITIES
from .errors import ConfigError
from .topology import Grid, TopologyConfig

SCHEMA_VERSION = 1

_TOPOLOGY_KEYS = {"n_clusters", "racks_per_cluster", "servers_per_rack",
                  "link_rate_bps", "fiber_length_m", "propagation_ns_per_m",
                  "tx_rx_processing_ns", "sync_jitter_ns"}
_DATAPLANE_KEYS = {"slot_ns", "payload_bytes", "voq_capacity",
                   "checkpoint_slots"}
_CONTROL_KEYS = {"orchestration_ms", "per_flowmod_ms", "stats_period_ms",
                 "cooldown_windows"}
_SLICE_KEYS = {"id", "name", "priority", "racks", "flows", "burst_frames",
               "loss_threshold", "latency_target_us", "wavelength"}
_FLOW_KEYS = {"src", "dsts", "load_factor", "burst_frames"}
_EXPERIMENT_KEYS = {"kind", "loads", "frames_per_point", "cdf_loads",
                    "load", "duration_ms", "slice", "add_racks", "at_ms",
                    "paired_baseline"}
_TOP_KEYS = {"schema", "name", "topology", "dataplane", "control", "slices",
             "experiment", "seeds", "reservoir_samples"}

EXPERIMENT_KINDS = ("sweep", "reconfigure", "balance")


@dataclass
class Flow:
    """One server worth of traffic from a source rack."""
    src: int
    dsts: dict
    load_factor: float = 1.0
    burst_frames: float | None = None  # None inherits the slice default


@dataclass
class SliceDef:
    slice_id: int
    name: str
    priority: int
    racks: tuple
    flows: tuple
    burst_frames: float = 1.0
    loss_threshold: float = 1e-5
    latency_target_us: float = 11.8
    wavelength: int | None = None


@dataclass
class Experiment:
    kind: str
    loads: tuple = ()                # sweep
    frames_per_point: int = 200_000  # sweep, per seed and load point
    cdf_loads: tuple = ()            # sweep: loads that sample latencies
    load: float = 1.0                # reconfigure / balance
    duration_ms: float = 300.0       # reconfigure / balance horizon
    slice: int = 0                   # reconfigure target
    add_racks: tuple = ()            # reconfigure delta
    at_ms: float = 50.0              # reconfigure request time
    paired_baseline: bool = True     # also run the arm without the action


@dataclass
class Scenario:
    name: str
    topology: TopologyConfig
    dataplane: DataPlaneParams
    control: ControlParams
    slices: tuple
    experiment: Experiment
    seeds: tuple
    reservoir_samples: int = 1_000_000
    raw: dict = field(default_factory=dict, repr=False)

    def grid(self) -> Grid:
        return Grid(self.topology)

    def slice_by_id(self, sid: int) -> SliceDef:
        for s in self.slices:
            if s.slice_id == sid:
                return s
        raise ConfigError(f"no slice {sid} in scenario {self.name}")


def _section(raw, key, default=None):
    value = raw.get(key, default if default is not None else {})
    return value if isinstance(value, dict) else None


def _bad_keys(mapping, allowed, where, out):
    for k in sorted(set(mapping) - allowed):
        out.append(f"{where}.{k}: unknown field")


def load_scenario(path) -> Scenario:
    """Parse a scenario file; raises ConfigError on anything invalid."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    scenario, diagnostics = parse_scenario(raw)
    if diagnostics:
        raise ConfigError("; ".join(diagnostics))
    return scenario


def bundled(name: str) -> Scenario:
    """Load one of the scenarios shipped inside the package."""
    ref = resources.files("opsquare_sim") / "scenarios" / f"{name}.scenario"
    with resources.as_file(ref) as path:
        return load_scenario(path)


def bundled_names() -> list:
    out = []
    for entry in (resources.files("opsquare_sim") / "scenarios").iterdir():
        if entry.name.endswith(".scenario"):
            out.append(entry.name[:-len(".scenario")])
    return sorted(out)


def parse_scenario(raw) -> tuple:
    """Build a Scenario plus a list of diagnostics (empty when valid)."""
    diags: list = []
    if not isinstance(raw, dict):
        return None, ["scenario: top level must be a mapping"]
    _bad_keys(raw, _TOP_KEYS, "scenario", diags)
    if raw.get("schema") != SCHEMA_VERSION:
        diags.append(f"schema: expected {SCHEMA_VERSION}, "
                     f"got {raw.get('schema')!r}")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        diags.append("name: required non-empty string")
        name = "unnamed"

    topology = _parse_topology(raw, diags)
    dataplane = _parse_dataplane(raw, diags)
    control = _parse_control(raw, diags)
    slices = _parse_slices(raw, topology, diags)
    experiment = _parse_experiment(raw, slices, topology, diags)

    seeds = raw.get("seeds", [1])
    if not (isinstance(seeds, list) and seeds
            and all(isinstance(s, int) for s in seeds)):
        diags.append("seeds: need a non-empty list of integers")
        seeds = [1]
    if len(set(seeds)) != len(seeds):
        diags.append("seeds: duplicate seed values")

    reservoir = raw.get("reservoir_samples", 1_000_000)
    if not isinstance(reservoir, int) or reservoir < 1:
        diags.append("reservoir_samples: need a positive integer")
        reservoir = 1_000_000

    scenario = Scenario(name, topology, dataplane, control, tuple(slices),
                        experiment, tuple(seeds), reservoir, raw)
    return scenario, diags


def _parse_topology(raw, diags) -> TopologyConfig:
    section = _section(raw, "topology")
    if section is None:
        diags.append("topology: must be a mapping")
        return TopologyConfig()
    _bad_keys(section, _TOPOLOGY_KEYS, "topology", diags)
    try:
        return TopologyConfig(**{k: v for k, v in section.items()
                                 if k in _TOPOLOGY_KEYS})
    except (ConfigError, TypeError) as exc:
        diags.append(f"topology: {exc}")
        return TopologyConfig()


def _parse_dataplane(raw, diags) -> DataPlaneParams:
    section = _section(raw, "dataplane")
    if section is None:
        diags.append("dataplane: must be a mapping")
        return DataPlaneParams()
    _bad_keys(section, _DATAPLANE_KEYS, "dataplane", diags)
    params = DataPlaneParams(**{k: v for k, v in section.items()
                                if k in _DATAPLANE_KEYS})
    if params.slot_ns < 1 or params.payload_bytes < 64:
        diags.append("dataplane: slot_ns and payload_bytes must be positive")
    if params.voq_capacity < 1:
        diags.append("dataplane.voq_capacity: must be at least 1")
    return params


def _parse_control(raw, diags) -> ControlParams:
    section = _section(raw, "control")
    if section is None:
        diags.append("control: must be a mapping")
        return ControlParams()
    _bad_keys(section, _CONTROL_KEYS, "control", diags)
    params = ControlParams()
    if "orchestration_ms" in section:
        params.orchestration_ns = int(section["orchestration_ms"] * 1e6)
    if "per_flowmod_ms" in section:
        params.per_flowmod_ns = int(section["per_flowmod_ms"] * 1e6)
    if "stats_period_ms" in section:
        params.stats_period_ns = int(section["stats_period_ms"] * 1e6)
    if "cooldown_windows" in section:
        params.cooldown_windows = int(section["cooldown_windows"])
    if params.stats_period_ns < 1 or params.orchestration_ns < 0:
        diags.append("control: delays must be non-negative, period positive")
    return params


def _parse_slices(raw, topology, diags) -> list:
    entries = raw.get("slices")
    if not isinstance(entries, list) or not entries:
        diags.append("slices: need a non-empty list")
        return []
    n_racks = topology.n_clusters * topology.racks_per_cluster
    out = []
    seen_ids = set()
    for i, entry in enumerate(entries):
        where = f"slices[{i}]"
        if not isinstance(entry, dict):
            diags.append(f"{where}: must be a mapping")
            continue
        _bad_keys(entry, _SLICE_KEYS, where, diags)
        sid = entry.get("id")
        if not isinstance(sid, int) or sid < 1:
            diags.append(f"{where}.id: need a positive integer")
            continue
        if sid in seen_ids:
            diags.append(f"{where}.id: duplicate slice id {sid}")
        seen_ids.add(sid)
        priority = entry.get("priority", 4)
        if priority not in PRIORITIES:
            diags.append(f"{where}.priority: priority out of range 1..4")
        racks = entry.get("racks")
        if not (isinstance(racks, list) and len(racks) >= 2
                and all(isinstance(r, int) for r in racks)):
            diags.append(f"{where}.racks: need a list of at least two racks")
            racks = []
        for r in racks:
            if not 1 <= r <= n_racks:
                diags.append(f"{where}.racks: rack {r} does not exist "
                             f"({n_racks} racks)")
        threshold = entry.get("loss_threshold", 1e-5)
        if not (isinstance(threshold, (int, float)) and 0 <= threshold <= 1):
            diags.append(f"{where}.loss_threshold: need a ratio in [0, 1]")
        burst = entry.get("burst_frames", 1.0)
        if not (isinstance(burst, (int, float)) and burst >= 1):
            diags.append(f"{where}.burst_frames: need a mean of at least 1")
        flows = _parse_flows(entry.get("flows"), where, racks, n_racks, diags)
        out.append(SliceDef(
            sid, entry.get("name", f"slice-{sid}"), priority,
            tuple(racks), tuple(flows), float(burst), float(threshold),
            float(entry.get("latency_target_us", 11.8)),
            entry.get("wavelength")))
    return out


def _parse_flows(entries, where, racks, n_racks, diags) -> list:
    if not isinstance(entries, list) or not entries:
        diags.append(f"{where}.flows: need a non-empty list")
        return []
    flows = []
    for j, entry in enumerate(entries):
        fwhere = f"{where}.flows[{j}]"
        if not isinstance(entry, dict):
            diags.append(f"{fwhere}: must be a mapping")
            continue
        _bad_keys(entry, _FLOW_KEYS, fwhere, diags)
        src = entry.get("src")
        if src not in racks:
            diags.append(f"{fwhere}.src: rack {src} is not in the slice")
            continue
        dsts = entry.get("dsts")
        if not (isinstance(dsts, dict) and dsts):
            diags.append(f"{fwhere}.dsts: need a destination weight mapping")
            continue
        for dst, weight in dsts.items():
            if not (isinstance(dst, int) and 1 <= dst <= n_racks):
                diags.append(f"{fwhere}.dsts: rack {dst} does not exist")
            elif dst == src:
                diags.append(f"{fwhere}.dsts: rack {dst} targets itself")
            if not (isinstance(weight, (int, float)) and weight > 0):
                diags.append(f"{fwhere}.dsts: weight for rack {dst} "
                             "must be positive")
        factor = entry.get("load_factor", 1.0)
        if not (isinstance(factor, (int, float)) and 0 < factor):
            diags.append(f"{fwhere}.load_factor: must be positive")
            factor = 1.0
        burst = entry.get("burst_frames")
        if burst is not None and burst < 1:
            diags.append(f"{fwhere}.burst_frames: need a mean of at least 1")
        flows.append(Flow(src, dict(dsts), float(factor),
                          None if burst is None else float(burst)))
    return flows


def _parse_experiment(raw, slices, topology, diags) -> Experiment:
    section = _section(raw, "experiment")
    if section is None:
        diags.append("experiment: must be a mapping")
        return Experiment("sweep")
    _bad_keys(section, _EXPERIMENT_KEYS, "experiment", diags)
    kind = section.get("kind")
    if kind not in EXPERIMENT_KINDS:
        diags.append(f"experiment.kind: expected one of {EXPERIMENT_KINDS}, "
                     f"got {kind!r}")
        kind = "sweep"
    exp = Experiment(kind)
    slice_ids = {s.slice_id for s in slices}
    slice_racks = {s.slice_id: set(s.racks) for s in slices}
    n_racks = topology.n_clusters * topology.racks_per_cluster

    loads = section.get("loads", [])
    if kind == "sweep":
        if not (isinstance(loads, list) and loads):
            diags.append("experiment.loads: sweep needs a non-empty list")
            loads = []
        exp.loads = tuple(float(v) for v in loads
                          if isinstance(v, (int, float)))
    for v in (loads if isinstance(loads, list) else []):
        if not (isinstance(v, (int, float)) and 0 < v <= 1):
            diags.append(f"experiment.loads: load {v} outside (0, 1]")
    exp.frames_per_point = section.get("frames_per_point", 200_000)
    if not isinstance(exp.frames_per_point, int) or exp.frames_per_point < 1:
        diags.append("experiment.frames_per_point: need a positive integer")
        exp.frames_per_point = 200_000
    cdf_loads = section.get("cdf_loads", [])
    if isinstance(cdf_loads, list):
        exp.cdf_loads = tuple(float(v) for v in cdf_loads)
        for v in exp.cdf_loads:
            if kind == "sweep" and v not in exp.loads:
                diags.append(f"experiment.cdf_loads: {v} is not a swept load")
    else:
        diags.append("experiment.cdf_loads: must be a list")

    load = section.get("load", 1.0)
    if not (isinstance(load, (int, float)) and 0 < load <= 1):
        diags.append(f"experiment.load: load {load} outside (0, 1]")
        load = 1.0
    exp.load = float(load)
    duration = section.get("duration_ms", 300.0)
    if not (isinstance(duration, (int, float)) and duration > 0):
        diags.append("experiment.duration_ms: must be positive")
        duration = 300.0
    exp.duration_ms = float(duration)
    exp.paired_baseline = bool(section.get("paired_baseline", True))

    if kind == "reconfigure":
        sid = section.get("slice")
        if sid not in slice_ids:
            diags.append(f"experiment.slice: no slice {sid!r} defined")
        exp.slice = sid if isinstance(sid, int) else 0
        add = section.get("add_racks")
        if not (isinstance(add, list) and add
                and all(isinstance(r, int) and 1 <= r <= n_racks for r in add)):
            diags.append("experiment.add_racks: need existing racks")
            add = []
        exp.add_racks = tuple(add)
        at_ms = section.get("at_ms", 50.0)
        if not (isinstance(at_ms, (int, float)) and at_ms >= 0):
            diags.append("experiment.at_ms: must be non-negative")
            at_ms = 50.0
        exp.at_ms = float(at_ms)
        if exp.at_ms >= exp.duration_ms:
            diags.append("experiment.at_ms: must fall inside duration_ms")

    max_load = max(exp.loads) if kind == "sweep" and exp.loads else exp.load
    for i, s in enumerate(slices):
        for j, flow in enumerate(s.flows):
            if flow.load_factor * max_load > 1.0 + 1e-9:
                diags.append(
                    f"slices[{i}].flows[{j}].load_factor: offered load "
                    f"{flow.load_factor * max_load:g} exceeds the server "
                    "line rate at the highest applied load")

    # traffic destinations must be reachable within the slice, except
    # toward racks an experiment later adds (their frames are expected
    # to be blocked until then)
    allowed_extra = set(exp.add_racks)
    for i, s in enumerate(slices):
        reachable = slice_racks[s.slice_id] | (
            allowed_extra if kind == "reconfigure" and s.slice_id == exp.slice
            else set())
        for j, flow in enumerate(s.flows):
            for dst in flow.dsts:
                if isinstance(dst, int) and 1 <= dst <= n_racks \
                        and dst not in reachable:
                    diags.append(
                        f"slices[{i}].flows[{j}].dsts: rack {dst} "
                        "is neither in the slice nor added by the experiment")
    return exp
