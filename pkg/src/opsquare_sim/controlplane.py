"""SDN control plane: discovery, slice lifecycle, statistics, balancing.

The controller owns all slice state and talks to one device agent per
ToR and switch over the binary session channel. Connectivity inside a
slice is a full mesh over its racks. For every unordered rack pair one
path is computed and installed in both directions (the reverse walks
the same hops), which keeps the device footprint of a pair equal to
the devices on that path. FlowMods of a batch are emitted after a
fixed orchestration delay, spaced by a per-message agent delay, and
the batch commits when the last one has been delivered; an Error reply
aborts the batch and rolls back exactly the entries it introduced.

Path choice takes the planned load of the other slices into account
(a slice never avoids its own paths), picking the candidate with the
least maximum link load and resolving ties toward the ES-first order.

Statistics arrive as per-device windowed counters and are aggregated
into per-slice rows: loss ratio is total lost over total sent in the
window, and the mean latency is averaged over the ToRs that delivered
frames (unweighted; destination ToRs do not report delivery counts).
When a window's loss ratio crosses the slice threshold the balancer
installs the alternative path for the worst rack pair and the source
LUTs split traffic between both paths per destination hash.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .dataplane import PRIORITIES
from .errors import ConfigError, ProtocolViolation
from .metrics import SliceMetrics
from .ofproto import (CAP_OPTICAL_FAST_SWITCHING, ErrorCode, ErrorMsg,
                      FeatureReply, FeatureRequest, FlowMod, FlowModCommand,
                      Session, StatsRecord, StatsReply, StatsRequest)
from .topology import TOR_PORT_ES, TOR_PORT_IS, Grid, NodeId, NodeKind, Path

WILDCARD_PORT = 0xFFFF  # FlowMod DELETE matching every destination / input


# --------------------------------------------------------------------------
# device agents
# --------------------------------------------------------------------------

class ToRAgent:
    """Message handler owned by one top-of-rack node.

    FlowMods mutate the LUT between slots (sessions deliver at slot
    boundaries), stats requests answer with windowed per-slice counters
    derived from the device's cumulative ones, reset on every read.
    """

    def __init__(self, device, grid: Grid, clock):
        self.device = device
        self.grid = grid
        self.clock = clock
        self._snap: dict = {}  # slice -> (generated, lost, lat_sum, lat_cnt)
        self._last_poll_ns = 0

    def handle(self, msg):
        if isinstance(msg, FeatureRequest):
            return FeatureReply(msg.xid, self.device.key, int(NodeKind.TOR), 2, 0)
        if isinstance(msg, FlowMod):
            return self._flow_mod(msg)
        if isinstance(msg, StatsRequest):
            return self._stats(msg)
        return ErrorMsg(msg.xid, ErrorCode.BAD_REQUEST,
                        f"unexpected {type(msg).__name__}")

    def _flow_mod(self, m: FlowMod):
        dev = self.device
        if m.command == FlowModCommand.DELETE:
            if m.in_port == WILDCARD_PORT:
                dev.delete_route(m.flow_id)
                return None
            if not 1 <= m.in_port <= self.grid.n_tors:
                return ErrorMsg(m.xid, ErrorCode.BAD_REQUEST,
                                f"no ToR with index {m.in_port}")
            if m.output_port is not None and \
                    m.output_port not in (TOR_PORT_IS, TOR_PORT_ES):
                return ErrorMsg(m.xid, ErrorCode.BAD_PORT,
                                f"ToR has no egress port {m.output_port}")
            dev.delete_route(m.flow_id, m.in_port, m.output_port)
            if not any(k[0] == m.flow_id for k in dev.routes):
                dev.slice_priority.pop(m.flow_id, None)
            return None
        if m.output_port is None:
            return ErrorMsg(m.xid, ErrorCode.BAD_REQUEST,
                            "ADD/MODIFY without an OUTPUT instruction")
        if m.output_port not in (TOR_PORT_IS, TOR_PORT_ES):
            return ErrorMsg(m.xid, ErrorCode.BAD_PORT,
                            f"ToR has no egress port {m.output_port}")
        if not 1 <= m.in_port <= self.grid.n_tors or m.in_port == dev.key:
            return ErrorMsg(m.xid, ErrorCode.BAD_REQUEST,
                            f"bad destination ToR {m.in_port}")
        if m.priority is not None and m.priority not in PRIORITIES:
            return ErrorMsg(m.xid, ErrorCode.BAD_REQUEST,
                            f"priority {m.priority} out of range")
        if m.command == FlowModCommand.ADD:
            dev.add_route(m.flow_id, m.in_port, m.output_port, m.wavelength)
        else:
            dev.replace_route(m.flow_id, m.in_port, m.output_port, m.wavelength)
        if m.priority is not None:
            dev.slice_priority[m.flow_id] = m.priority
        return None

    def _stats(self, m: StatsRequest) -> StatsReply:
        dev = self.device
        now = self.clock.now
        window = int(now - self._last_poll_ns)
        self._last_poll_ns = now
        slices = set(dev.generated) | set(dev.lost_overflow) \
            | set(dev.lost_no_route) | set(dev.lat_cnt)
        records = []
        for s in sorted(slices):
            gen = dev.generated.get(s, 0)
            lost = dev.lost_overflow.get(s, 0) + dev.lost_no_route.get(s, 0)
            lsum = dev.lat_sum.get(s, 0.0)
            lcnt = dev.lat_cnt.get(s, 0)
            p_gen, p_lost, p_sum, p_cnt = self._snap.get(s, (0, 0, 0.0, 0))
            self._snap[s] = (gen, lost, lsum, lcnt)
            d_gen, d_lost, d_cnt = gen - p_gen, lost - p_lost, lcnt - p_cnt
            if not (d_gen or d_lost or d_cnt):
                continue
            mean = round((lsum - p_sum) / d_cnt) if d_cnt else 0
            records.append(StatsRecord(s, d_lost, 0, d_gen, mean, window))
        return StatsReply(m.xid, tuple(records))


class SwitchAgent:
    """Message handler owned by one optical switch (IS or ES)."""

    def __init__(self, device, grid: Grid, clock):
        self.device = device
        self.grid = grid
        self.clock = clock
        self._snap: dict = {}  # slice -> contention nack count
        self._last_poll_ns = 0

    def handle(self, msg):
        if isinstance(msg, FeatureRequest):
            dev = self.device
            return FeatureReply(msg.xid, dev.key, int(dev.kind), dev.radix,
                                CAP_OPTICAL_FAST_SWITCHING)
        if isinstance(msg, FlowMod):
            return self._flow_mod(msg)
        if isinstance(msg, StatsRequest):
            return self._stats(msg)
        return ErrorMsg(msg.xid, ErrorCode.BAD_REQUEST,
                        f"unexpected {type(msg).__name__}")

    def _flow_mod(self, m: FlowMod):
        dev = self.device
        radix = dev.radix
        if m.command == FlowModCommand.DELETE:
            if m.in_port == WILDCARD_PORT:
                dev.remove_flow(m.flow_id)
                return None
            if not 1 <= m.in_port <= radix:
                return ErrorMsg(m.xid, ErrorCode.BAD_PORT,
                                f"switch has no port {m.in_port}")
            if m.output_port is None:
                dev.permits = {p for p in dev.permits
                               if not (p[0] == m.flow_id and p[1] == m.in_port)}
                return None
            if not 1 <= m.output_port <= radix:
                return ErrorMsg(m.xid, ErrorCode.BAD_PORT,
                                f"switch has no port {m.output_port}")
            dev.remove_permit(m.flow_id, m.in_port, m.output_port)
            return None
        if m.output_port is None:
            return ErrorMsg(m.xid, ErrorCode.BAD_REQUEST,
                            "permit without an OUTPUT instruction")
        if not 1 <= m.in_port <= radix:
            return ErrorMsg(m.xid, ErrorCode.BAD_PORT,
                            f"switch has no port {m.in_port}")
        if not 1 <= m.output_port <= radix:
            return ErrorMsg(m.xid, ErrorCode.BAD_PORT,
                            f"switch has no port {m.output_port}")
        dev.add_permit(m.flow_id, m.in_port, m.output_port)
        return None

    def _stats(self, m: StatsRequest) -> StatsReply:
        dev = self.device
        now = self.clock.now
        window = int(now - self._last_poll_ns)
        self._last_poll_ns = now
        records = []
        for s in sorted(dev.nack_contention):
            cum = dev.nack_contention[s]
            delta = cum - self._snap.get(s, 0)
            self._snap[s] = cum
            if delta:
                records.append(StatsRecord(s, 0, delta, 0, 0, window))
        return StatsReply(m.xid, tuple(records))


# --------------------------------------------------------------------------
# slice model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QoS:
    loss_threshold: float = 1e-5
    latency_target_ns: float = 11_800.0


@dataclass(frozen=True)
class SliceSpec:
    """A network slice request: VNF placements plus QoS class.

    placements is a tuple of (rack NodeId, server index); connectivity
    is a full mesh over the distinct racks.
    """
    slice_id: int
    placements: tuple
    priority: int = 4
    qos: QoS = QoS()
    wavelength: int | None = None  # None picks the lowest unused one


class SliceStatus(Enum):
    PROVISIONING = "provisioning"
    ACTIVE = "active"
    RECONFIGURING = "reconfiguring"
    FAILED = "failed"
    REMOVED = "removed"


class SliceState:
    """Controller-side record of one slice."""

    def __init__(self, spec: SliceSpec, wavelength: int):
        self.spec = spec
        self.wavelength = wavelength
        self.status = SliceStatus.PROVISIONING
        self.racks: tuple = ()        # sorted flat ToR indices
        self.active_paths: dict = {}  # (src, dst) -> [(Path, weight)]
        self.installed_flowmods: list = []  # (send t_ns, device key, FlowMod)
        self.entries: dict = {}       # device key -> set of LUT entry tuples
        self.cooldown = 0             # stats windows until balancing may act
        self.pending = 0              # FlowMod batches in flight


@dataclass
class ControlParams:
    orchestration_ns: int = 120_000_000  # path computation and OPM overhead
    per_flowmod_ns: int = 1_000_000      # agent processing per message
    session_delay_ns: int = 0
    stats_period_ns: int = 100_000_000
    loss_threshold: float = 1e-5
    cooldown_windows: int = 10
    balance_enabled: bool = True


class _Batch:
    """One in-flight group of FlowMods sharing a commit action."""

    __slots__ = ("mods", "new_entries", "t0", "commit", "restore_status",
                 "kind", "aborted", "last_send_ns")

    def __init__(self, mods, new_entries, t0, commit, restore_status, kind):
        self.mods = mods
        self.new_entries = new_entries
        self.t0 = t0
        self.commit = commit
        self.restore_status = restore_status
        self.kind = kind
        self.aborted = False
        self.last_send_ns = t0


# --------------------------------------------------------------------------
# controller
# --------------------------------------------------------------------------

class Controller:
    """Central orchestrator over per-device sessions.

    All public operations are asynchronous: they validate and schedule
    immediately, and the slice flips status when the last FlowMod of
    the batch has been delivered. With the default zero-delay sessions
    everything a call triggers resolves at the scheduled instants on
    the shared clock.
    """

    def __init__(self, grid: Grid, clock, params: ControlParams | None = None):
        self.grid = grid
        self.clock = clock
        self.params = params or ControlParams()
        self.sessions: dict = {}       # device key -> Session
        self.slices: dict = {}         # slice id -> SliceState
        self.topology_view: dict = {}  # device key -> FeatureReply
        self.metrics: list = []        # SliceMetrics rows, one per slice/window
        self.events: list = []         # (t_ns, kind, detail)
        self._xid = 0
        self._link_load: dict = {}     # slice -> {(from, to) key pair -> weight}
        self._pending_stats = None
        self._last_poll_ns = 0

    # --- plumbing ---------------------------------------------------------

    def _next_xid(self) -> int:
        self._xid += 1
        return self._xid

    def _log(self, kind: str, detail: str):
        self.events.append((self.clock.now, kind, detail))

    def _names(self, keys) -> str:
        return "+".join(self.grid.node_name(k) for k in sorted(set(keys)))

    # --- discovery ----------------------------------------------------------

    def discover_topology(self) -> dict:
        """FeatureRequest every device; returns {device key: FeatureReply}.

        Runs events due now, so with zero-delay sessions the view is
        complete on return. Intended for the setup phase, before the
        slot loop owns the clock.
        """
        self.topology_view = {}
        for key in sorted(self.sessions):
            self.sessions[key].request(FeatureRequest(self._next_xid()),
                                       self._feature_cb(key))
        self.clock.run_due(self.clock.now)
        return self.topology_view

    def _feature_cb(self, key):
        def cb(reply):
            if not isinstance(reply, FeatureReply):
                raise ProtocolViolation(
                    f"discovery failed at {self.grid.node_name(key)}")
            self.topology_view[key] = reply
            if len(self.topology_view) == len(self.sessions):
                self._log("discovered", f"devices={len(self.topology_view)}")
        return cb

    def check_topology_view(self):
        """Cross-check the discovered view against the fabric layout."""
        missing = sorted(k for k in self.sessions if k not in self.topology_view)
        if missing:
            raise ProtocolViolation(
                f"no discovery reply from {self._names(missing)}")
        g = self.grid
        for node in g.nodes:
            key = g.node_key(node)
            reply = self.topology_view[key]
            if node.kind == NodeKind.TOR:
                want = (int(NodeKind.TOR), 2, 0)
            else:
                want = (int(node.kind), g.switch_radix(node),
                        CAP_OPTICAL_FAST_SWITCHING)
            got = (reply.device_kind, reply.n_ports, reply.capabilities)
            if got != want or reply.datapath_id != key:
                raise ProtocolViolation(
                    f"{g.node_name(key)} reported kind={reply.device_kind} "
                    f"ports={reply.n_ports} caps={reply.capabilities}")

    # --- path computation -----------------------------------------------------

    def compute_path(self, src: NodeId, dst: NodeId, link_loads: dict) -> Path:
        """Candidate with the least maximum link load; ties go ES-first.

        link_loads maps directed (device key, device key) links to
        planned weight. Candidates come pre-ordered ES-first.
        """
        g = self.grid
        best = None
        best_cost = 0.0
        for path in g.paths(src, dst):
            cost = 0.0
            for u, v in path.links():
                w = link_loads.get((g.node_key(u), g.node_key(v)), 0.0)
                if w > cost:
                    cost = w
            if best is None or cost < best_cost:
                best, best_cost = path, cost
        return best

    def _loads_excluding(self, slice_id: int) -> dict:
        merged: dict = {}
        for sid, loads in self._link_load.items():
            if sid == slice_id:
                continue
            for link, w in loads.items():
                merged[link] = merged.get(link, 0.0) + w
        return merged

    def _recompute_loads(self, state: SliceState):
        loads: dict = {}
        g = self.grid
        for plist in state.active_paths.values():
            for path, weight in plist:
                for u, v in path.links():
                    link = (g.node_key(u), g.node_key(v))
                    loads[link] = loads.get(link, 0.0) + weight
        self._link_load[state.spec.slice_id] = loads

    # --- slice lifecycle --------------------------------------------------------

    def provision_slice(self, spec: SliceSpec, on_active=None) -> SliceState:
        """Compute and install full-mesh connectivity for a new slice."""
        self._validate_spec(spec)
        wavelength = spec.wavelength if spec.wavelength is not None \
            else self._pick_wavelength()
        state = SliceState(spec, wavelength)
        state.racks = tuple(sorted({self.grid.tor_index(rack)
                                    for rack, _server in spec.placements}))
        self.slices[spec.slice_id] = state
        mods, paths = self._plan_pairs(state, _pairs(state.racks),
                                       set_priority=True)
        sid = spec.slice_id
        t0 = self.clock.now

        def commit(new_entries):
            state.status = SliceStatus.ACTIVE
            self._merge_entries(state, new_entries)
            for (a, b), path in paths:
                state.active_paths[(a, b)] = [(path, 1.0)]
                state.active_paths[(b, a)] = [(_reverse(path), 1.0)]
            self._recompute_loads(state)
            self._log("provisioned",
                      f"slice={sid}|devices={self._names(k for k, _f, _e in mods)}"
                      f"|flowmods={len(mods)}|wall_ns={self.clock.now - t0}")
            if on_active is not None:
                on_active(state)

        self._dispatch(state, "provision", mods, commit, SliceStatus.FAILED)
        return state

    def reconfigure_slice(self, slice_id: int, add_racks,
                          on_active=None) -> SliceState:
        """Extend an active slice with new racks; existing paths stay put."""
        state = self._active_slice(slice_id, "reconfigure")
        new = sorted({self.grid.tor_index(r) for r in add_racks}
                     - set(state.racks))
        t0 = self.clock.now
        if not new:
            self._log("reconfigured",
                      f"slice={slice_id}|devices=|flowmods=0|wall_ns=0")
            return state
        racks = tuple(sorted(set(state.racks) | set(new)))
        pairs = [(a, b) for a, b in _pairs(racks)
                 if a in new or b in new]
        mods, paths = self._plan_pairs(state, pairs, set_priority=True)
        state.status = SliceStatus.RECONFIGURING

        def commit(new_entries):
            state.status = SliceStatus.ACTIVE
            state.racks = racks
            self._merge_entries(state, new_entries)
            for (a, b), path in paths:
                state.active_paths[(a, b)] = [(path, 1.0)]
                state.active_paths[(b, a)] = [(_reverse(path), 1.0)]
            self._recompute_loads(state)
            self._log("reconfigured",
                      f"slice={slice_id}"
                      f"|devices={self._names(k for k, _f, _e in mods)}"
                      f"|flowmods={len(mods)}|wall_ns={self.clock.now - t0}")
            if on_active is not None:
                on_active(state)

        self._dispatch(state, "reconfigure", mods, commit, SliceStatus.ACTIVE)
        return state

    def remove_slice(self, slice_id: int):
        """Tear down exactly the LUT entries this slice installed."""
        state = self._active_slice(slice_id, "remove")
        mods = []
        for key in sorted(state.entries):  # ToR keys precede switch keys
            for entry in sorted(state.entries[key]):
                fm = self._delete_mod(entry, state.wavelength)
                if fm is not None:
                    mods.append((key, fm, ()))
        t0 = self.clock.now

        def commit(_new_entries):
            state.status = SliceStatus.REMOVED
            state.entries = {}
            state.active_paths = {}
            self._link_load.pop(slice_id, None)
            self._log("removed",
                      f"slice={slice_id}"
                      f"|devices={self._names(k for k, _f, _e in mods)}"
                      f"|flowmods={len(mods)}|wall_ns={self.clock.now - t0}")

        self._dispatch(state, "remove", mods, commit, SliceStatus.ACTIVE)

    def _active_slice(self, slice_id: int, verb: str) -> SliceState:
        state = self.slices.get(slice_id)
        if state is None:
            raise ConfigError(f"cannot {verb}: no slice {slice_id}")
        if state.status != SliceStatus.ACTIVE:
            raise ConfigError(f"cannot {verb} slice {slice_id} "
                              f"while {state.status.value}")
        if state.pending:
            raise ConfigError(f"cannot {verb} slice {slice_id} "
                              "with a FlowMod batch in flight")
        return state

    def _validate_spec(self, spec: SliceSpec):
        if not 0 <= spec.slice_id < (1 << 32):
            raise ConfigError(f"slice_id {spec.slice_id} out of range")
        if spec.slice_id in self.slices:
            raise ConfigError(f"slice_id {spec.slice_id} already in use")
        if len(spec.placements) < 2:
            raise ConfigError("a slice needs at least two VNF placements")
        if spec.priority not in PRIORITIES:
            raise ConfigError(f"priority {spec.priority} out of range 1..4")
        for rack, server in spec.placements:
            self.grid.tor_index(rack)  # raises for unknown racks
            if not 1 <= server <= self.grid.config.servers_per_rack:
                raise ConfigError(f"no server {server} in rack {rack}")
        if not 0.0 <= spec.qos.loss_threshold <= 1.0:
            raise ConfigError("loss_threshold must be a ratio in [0, 1]")
        if spec.qos.latency_target_ns <= 0:
            raise ConfigError("latency_target_ns must be positive")
        if spec.wavelength is not None and not 1 <= spec.wavelength < (1 << 16):
            raise ConfigError(f"wavelength {spec.wavelength} out of range")

    def _pick_wavelength(self) -> int:
        used = {st.wavelength for st in self.slices.values()
                if st.status not in (SliceStatus.REMOVED, SliceStatus.FAILED)}
        w = 1
        while w in used:
            w += 1
        return w

    # --- FlowMod planning ------------------------------------------------------

    def _plan_pairs(self, state: SliceState, pairs, set_priority):
        loads = self._loads_excluding(state.spec.slice_id)
        mods = []
        paths = []
        for a, b in pairs:
            path = self.compute_path(self.grid.tor_at(a), self.grid.tor_at(b),
                                     loads)
            paths.append(((a, b), path))
            mods += self._path_mods(state, path, set_priority)
            mods += self._path_mods(state, _reverse(path), set_priority)
        return mods, paths

    def _path_mods(self, state: SliceState, path: Path, set_priority):
        """FlowMods installing one direction: switches, relay, then source."""
        g = self.grid
        s = state.spec.slice_id
        wl = state.wavelength
        hops = path.hops
        dst = g.tor_index(hops[-1])
        mods = []
        for i in range(1, len(hops) - 1, 2):
            sw = hops[i]
            pin = g.switch_port_of(sw, hops[i - 1])
            pout = g.switch_port_of(sw, hops[i + 1])
            fm = FlowMod(self._next_xid(), FlowModCommand.ADD, pin, s, wl, pout)
            mods.append((g.node_key(sw), fm, (("permit", s, pin, pout),)))
        for j in range(len(hops) - 3, -1, -2):  # relay ToR first, source last
            tor = hops[j]
            egress = TOR_PORT_IS if hops[j + 1].kind == NodeKind.IS \
                else TOR_PORT_ES
            prio = state.spec.priority if set_priority and j == 0 else None
            fm = FlowMod(self._next_xid(), FlowModCommand.ADD, dst, s, wl,
                         egress, prio)
            entries = [("route", s, dst, egress)]
            if prio is not None:
                entries.append(("prio", s, prio))
            mods.append((g.tor_index(tor), fm, tuple(entries)))
        return mods

    def _delete_mod(self, entry, wavelength):
        kind = entry[0]
        if kind == "route":
            _, s, dst, egress = entry
            return FlowMod(self._next_xid(), FlowModCommand.DELETE, dst, s,
                           wavelength, egress)
        if kind == "permit":
            _, s, pin, pout = entry
            return FlowMod(self._next_xid(), FlowModCommand.DELETE, pin, s,
                           wavelength, pout)
        return None  # priority state follows the last route out

    @staticmethod
    def _merge_entries(state: SliceState, new_entries: dict):
        for key, entries in new_entries.items():
            state.entries.setdefault(key, set()).update(entries)

    # --- batch dispatch ----------------------------------------------------------

    def _dispatch(self, state, kind, mods, commit, restore_status):
        new_entries: dict = {}
        for key, _fm, entries in mods:
            have = state.entries.get(key, ())
            fresh = new_entries.setdefault(key, set())
            for e in entries:
                if e not in have:
                    fresh.add(e)
        t0 = self.clock.now
        if not mods:
            commit(new_entries)
            return
        batch = _Batch(mods, new_entries, t0, commit, restore_status, kind)
        state.pending += 1
        start = t0 + self.params.orchestration_ns
        per = self.params.per_flowmod_ns
        last = len(mods) - 1
        for i, (key, fm, _entries) in enumerate(mods):
            self.clock.schedule(start + (i + 1) * per, self._send_mod,
                                state, batch, key, fm, i == last)

    def _send_mod(self, state, batch, key, fm, is_last):
        if batch.aborted:
            return
        now = self.clock.now
        batch.last_send_ns = now
        state.installed_flowmods.append((now, key, fm))
        session = self.sessions[key]
        session.request(fm, lambda reply: self._mod_reply(state, batch, key, reply))
        if is_last:
            self.clock.schedule(now + session.delay_ns, self._complete,
                                state, batch)

    def _complete(self, state, batch):
        if batch.aborted:
            return
        state.pending -= 1
        if state.status in (SliceStatus.FAILED, SliceStatus.REMOVED):
            return
        batch.commit(batch.new_entries)

    def _mod_reply(self, state, batch, key, reply):
        if not isinstance(reply, ErrorMsg):
            raise ProtocolViolation(
                f"unexpected FlowMod reply {type(reply).__name__}")
        if batch.aborted:
            return
        batch.aborted = True
        state.pending -= 1
        state.status = batch.restore_status
        self._log(f"{batch.kind}_failed",
                  f"slice={state.spec.slice_id}"
                  f"|device={self.grid.node_name(key)}"
                  f"|code={reply.code.name}|text={reply.text}")
        self._rollback(state, batch)

    def _rollback(self, state, batch):
        """Undo the entries a failed batch introduced, nothing else."""
        delay = max((s.delay_ns for s in self.sessions.values()), default=0)
        per = self.params.per_flowmod_ns
        t = self.clock.now + delay
        n = 0
        seen: set = set()
        for key, _fm, entries in reversed(batch.mods):
            for entry in reversed(entries):
                if (key, entry) in seen or entry not in batch.new_entries.get(key, ()):
                    continue
                seen.add((key, entry))
                fm = self._delete_mod(entry, state.wavelength)
                if fm is None:
                    continue
                n += 1
                self.clock.schedule(t + n * per, self.sessions[key].request, fm)
        self.clock.schedule(t + n * per + delay, self._log,
                            f"{batch.kind}_rolled_back",
                            f"slice={state.spec.slice_id}|flowmods={n}")

    # --- statistics and balancing ---------------------------------------------------

    def collect_stats(self):
        """Broadcast one StatsRequest round; the window aggregates when
        the last reply lands."""
        if self._pending_stats is not None:
            self._log("stats_incomplete",
                      f"outstanding={len(self._pending_stats[0])}")
        waiting = set(self.sessions)
        records: dict = {}
        self._pending_stats = (waiting, records)
        for key in sorted(self.sessions):
            self.sessions[key].request(StatsRequest(self._next_xid()),
                                       self._stats_cb(key, waiting, records))

    def start_stats(self, period_ns: int | None = None):
        """Begin periodic polling; each round may trigger the balancer."""
        period = period_ns or self.params.stats_period_ns

        def tick():
            self.collect_stats()
            self.clock.schedule(self.clock.now + period, tick)

        self.clock.schedule(self.clock.now + period, tick)

    def _stats_cb(self, key, waiting, records):
        def cb(reply):
            if not isinstance(reply, StatsReply):
                raise ProtocolViolation(
                    f"stats failed at {self.grid.node_name(key)}")
            waiting.discard(key)
            records[key] = reply.records
            if not waiting:
                if self._pending_stats is None or \
                        self._pending_stats[1] is not records:
                    return  # superseded by a newer poll, drop the window
                self._pending_stats = None
                self._aggregate(records)
        return cb

    def _aggregate(self, records: dict):
        t = self.clock.now
        n_tors = self.grid.n_tors
        sums: dict = {}
        per_tor_lost: dict = {}  # (slice, ToR key) -> lost in window
        w_max = 0
        for key in sorted(records):
            for r in records[key]:
                agg = sums.setdefault(r.slice_id, [0, 0, 0, 0.0, 0])
                agg[0] += r.packets_sent
                agg[1] += r.lost_packets
                agg[2] += r.retransmitted_packets
                if r.mean_latency_ns:
                    agg[3] += r.mean_latency_ns
                    agg[4] += 1
                if r.window_ns > w_max:
                    w_max = r.window_ns
                if r.lost_packets and key <= n_tors:
                    per_tor_lost[(r.slice_id, key)] = \
                        per_tor_lost.get((r.slice_id, key), 0) + r.lost_packets
        window_ns = w_max or int(t - self._last_poll_ns)
        self._last_poll_ns = t
        window = []
        for sid in sorted(self.slices):
            state = self.slices[sid]
            if state.status not in (SliceStatus.ACTIVE,
                                    SliceStatus.RECONFIGURING):
                continue
            sent, lost, rtx, lat_sum, lat_n = sums.get(sid, (0, 0, 0, 0.0, 0))
            window.append(SliceMetrics(
                t, sid, window_ns, sent, lost, rtx,
                lost / sent if sent else 0.0,
                lat_sum / lat_n if lat_n else 0.0))
        self.metrics.extend(window)
        if self.params.balance_enabled:
            self.check_thresholds_and_balance(window, per_tor_lost)

    def check_thresholds_and_balance(self, window, per_tor_lost=None):
        """Split the worst rack pair of any slice over its loss threshold.

        Returns the slice ids acted on. At most one action per slice per
        cool-down span of stats windows.
        """
        per_tor_lost = per_tor_lost or {}
        acted = []
        for row in window:
            state = self.slices.get(row.slice_id)
            if state is None or state.status != SliceStatus.ACTIVE:
                continue
            if state.cooldown > 0:
                state.cooldown -= 1
                continue
            if row.sent == 0 or row.loss_ratio <= state.spec.qos.loss_threshold:
                continue
            if self._rebalance(state, row, per_tor_lost):
                acted.append(row.slice_id)
        return acted

    def _rebalance(self, state: SliceState, row, per_tor_lost) -> bool:
        sid = state.spec.slice_id
        g = self.grid
        candidates = []
        for a, b in _pairs(state.racks):
            if len(state.active_paths.get((a, b), ())) != 1:
                continue  # already split, or not yet committed
            if len(g.paths(g.tor_at(a), g.tor_at(b))) < 2:
                continue  # single-path pair, nothing to balance onto
            lost = per_tor_lost.get((sid, a), 0) + per_tor_lost.get((sid, b), 0)
            candidates.append((-lost, a, b))
        if not candidates:
            self._log("balance_skipped",
                      f"slice={sid}|reason=no-alternative-path")
            return False
        _, a, b = min(candidates)
        options = g.paths(g.tor_at(a), g.tor_at(b))
        installed = state.active_paths[(a, b)][0][0]
        alt = options[1] if options[0] == installed else options[0]
        self._log("balance_triggered",
                  f"slice={sid}|pair={g.node_name(a)}-{g.node_name(b)}"
                  f"|loss_ratio={row.loss_ratio:.3g}"
                  f"|alt={g.node_name(g.node_key(alt.hops[1]))}-first")
        mods = self._path_mods(state, alt, set_priority=False)
        mods += self._path_mods(state, _reverse(alt), set_priority=False)
        state.cooldown = self.params.cooldown_windows
        t0 = self.clock.now

        def commit(new_entries):
            self._merge_entries(state, new_entries)
            old_fwd, _w = state.active_paths[(a, b)][0]
            old_rev, _w = state.active_paths[(b, a)][0]
            state.active_paths[(a, b)] = [(old_fwd, 0.5), (alt, 0.5)]
            state.active_paths[(b, a)] = [(old_rev, 0.5), (_reverse(alt), 0.5)]
            self._recompute_loads(state)
            self._log("rebalanced",
                      f"slice={sid}|pair={g.node_name(a)}-{g.node_name(b)}"
                      f"|devices={self._names(k for k, _f, _e in mods)}"
                      f"|flowmods={len(mods)}|wall_ns={self.clock.now - t0}")

        self._dispatch(state, "balance", mods, commit, SliceStatus.ACTIVE)
        return True


# --------------------------------------------------------------------------
# helpers and wiring
# --------------------------------------------------------------------------

def _pairs(racks):
    return [(a, b) for i, a in enumerate(racks) for b in racks[i + 1:]]


def _reverse(path: Path) -> Path:
    return Path(tuple(reversed(path.hops)))


def wire(engine, params: ControlParams | None = None) -> Controller:
    """One agent and session per device of `engine`, plus the controller."""
    params = params or ControlParams()
    ctrl = Controller(engine.grid, engine.clock, params)
    delay = params.session_delay_ns
    for key in sorted(engine.tors):
        agent = ToRAgent(engine.tors[key], engine.grid, engine.clock)
        ctrl.sessions[key] = Session(engine.clock, agent.handle, delay)
    for key in sorted(engine.switches):
        agent = SwitchAgent(engine.switches[key], engine.grid, engine.clock)
        ctrl.sessions[key] = Session(engine.clock, agent.handle, delay)
    return ctrl
