"""Slotted optical data plane with label-based flow control.

Each slot boundary runs five phases in fixed order: deliver packets that
finished their flight, drain due control events (LUT updates land here,
between slots), pump traffic sources up to the boundary, assemble frames
into packets and emit at most one label per ToR egress link, then
arbitrate per switch output and apply the verdicts. An ACK commits the
packet to the fiber; NACK(Contention) leaves it at the head of its VOQ
for the next slot; NACK(NoRoute) drops it at the source.

Hot-path structures are plain ints, tuples and dicts on purpose: a sweep
point simulates tens of millions of slots in CPython.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

from .errors import ProtocolViolation
from .events import EventQueue
from .rng import combine
from .topology import TOR_PORT_ES, TOR_PORT_IS, Grid, NodeKind

PRIORITIES = (1, 2, 3, 4)  # 1 preempts 2 preempts 3 preempts 4
DEFAULT_PRIORITY = 4

ACK = 0
NACK_CONTENTION = 1
NACK_NO_ROUTE = 2


class Frame(NamedTuple):
    size: int
    created_ns: float
    slice_id: int
    src: int  # flat ToR index
    dst: int


class OpticalPacket:
    """Aggregate of same-slice frames to one destination ToR."""

    __slots__ = ("slice_id", "src", "dst", "priority", "wavelength",
                 "frames", "size_bytes", "created_ns", "egress", "arrive_ns")

    def __init__(self, slice_id, src, dst, priority, wavelength, frames, size_bytes):
        self.slice_id = slice_id
        self.src = src
        self.dst = dst
        self.priority = priority
        self.wavelength = wavelength
        self.frames = frames
        self.size_bytes = size_bytes
        self.created_ns = frames[0].created_ns
        self.egress = 0
        self.arrive_ns = 0


@dataclass
class DataPlaneParams:
    slot_ns: int = 1280
    payload_bytes: int = 1536
    voq_capacity: int = 64          # packets per (destination, uplink) queue
    checkpoint_slots: int = 10_000  # 0 disables the conservation audit
    trace: bool = False             # per-emission/grant records, tests only


class ToR:
    """Top-of-rack node: VOQ buffers, label scheduler, LUT."""

    def __init__(self, key: int, engine: "Engine"):
        self.key = key
        self.engine = engine
        # routing state, mutated only between slots by the agent
        self.routes: dict = {}          # (slice, dst) -> (out_ports tuple, wavelength)
        self.slice_priority: dict = {}  # slice -> 1..4
        # queues: priority -> {(dst, egress) -> deque[OpticalPacket]},
        # non-empty only; a split route gets one queue per uplink
        self.queues: dict = {p: {} for p in PRIORITIES}
        self.assembly: dict = {}        # (dst, slice) -> [Frame]
        self.backlog_packets = 0
        self.rr_last: dict = {}         # (egress, priority) -> last served dst
        self.retry: dict = {TOR_PORT_IS: None, TOR_PORT_ES: None}
        self._serial: dict = {}         # (slice, dst) -> count, for path spreading
        # per-slice counters (frames unless noted)
        self.generated: dict = {}
        self.delivered: dict = {}
        self.lost_overflow: dict = {}
        self.lost_no_route: dict = {}
        self.buffered: dict = {}
        self.lat_sum: dict = {}
        self.lat_cnt: dict = {}
        # static tables filled by the engine
        self.out_port: dict = {}        # (egress, dst) -> requested switch port
        self.next_tor: dict = {}        # (egress, dst) -> ToR reached
        self.switch_for: dict = {}      # egress -> OpticalSwitch
        self.in_port_at: dict = {}      # egress -> our port on that switch
        self.default_egress: dict = {}  # dst -> egress link

    # --- LUT, driven by the device agent ---------------------------------

    def add_route(self, slice_id: int, dst: int, out: int, wavelength: int):
        key = (slice_id, dst)
        outs, _ = self.routes.get(key, ((), 0))
        if out not in outs:
            outs = tuple(sorted(outs + (out,)))
        self.routes[key] = (outs, wavelength)

    def replace_route(self, slice_id: int, dst: int, out: int, wavelength: int):
        self.routes[(slice_id, dst)] = ((out,), wavelength)

    def delete_route(self, slice_id: int, dst: int | None = None,
                     out: int | None = None):
        if dst is None:
            for key in [k for k in self.routes if k[0] == slice_id]:
                del self.routes[key]
            self.slice_priority.pop(slice_id, None)
            return
        key = (slice_id, dst)
        if key not in self.routes:
            return
        if out is None:
            del self.routes[key]
            return
        outs, wl = self.routes[key]
        outs = tuple(o for o in outs if o != out)
        if outs:
            self.routes[key] = (outs, wl)
        else:
            del self.routes[key]

    # --- traffic ingress ---------------------------------------------------

    def accept_frame(self, frame: Frame):
        s = frame.slice_id
        self.generated[s] = self.generated.get(s, 0) + 1
        self.buffered[s] = self.buffered.get(s, 0) + 1
        buf = self.assembly.get((frame.dst, s))
        if buf is None:
            self.assembly[(frame.dst, s)] = [frame]
            self.engine.busy.add(self)
        else:
            buf.append(frame)

    # --- slot work ----------------------------------------------------------

    def flush_assembly(self, payload: int, capacity: int):
        """Pack this slot's frames into packets and enqueue per (dst, uplink)."""
        if not self.assembly:
            return
        for (dst, s), frames in self.assembly.items():
            prio = self.slice_priority.get(s, DEFAULT_PRIORITY)
            route = self.routes.get((s, dst))
            qmap = self.queues[prio]
            start = 0
            n = len(frames)
            while start < n:
                size = frames[start].size
                end = start + 1
                while end < n and size + frames[end].size <= payload:
                    size += frames[end].size
                    end += 1
                group = frames[start:end]
                start = end
                if route is None:
                    egress = self.default_egress[dst]
                    wavelength = 0
                else:
                    outs, wavelength = route
                    if len(outs) == 1:
                        egress = outs[0]
                    else:
                        serial = self._serial.get((s, dst), 0)
                        self._serial[(s, dst)] = serial + 1
                        egress = outs[combine(s, self.key, dst, serial) % len(outs)]
                dq = qmap.get((dst, egress))
                if dq is None:
                    dq = qmap[(dst, egress)] = deque()
                elif len(dq) >= capacity:
                    lost = len(group)
                    self.buffered[s] -= lost
                    self.lost_overflow[s] = self.lost_overflow.get(s, 0) + lost
                    continue
                pkt = OpticalPacket(s, self.key, dst, prio, wavelength, group, size)
                pkt.egress = egress
                dq.append(pkt)
                self.backlog_packets += 1
        self.assembly.clear()

    def enqueue_transit(self, pkt: OpticalPacket, capacity: int):
        """Second-leg admission at a relay ToR (same VOQ discipline)."""
        s = pkt.slice_id
        route = self.routes.get((s, pkt.dst))
        if route is None:
            pkt.egress = self.default_egress[pkt.dst]
        else:
            outs, wl = route
            pkt.egress = outs[0]
            pkt.wavelength = wl
        qmap = self.queues[pkt.priority]
        key = (pkt.dst, pkt.egress)
        dq = qmap.get(key)
        if dq is None:
            dq = qmap[key] = deque()
        n = len(pkt.frames)
        if len(dq) >= capacity:
            self.lost_overflow[s] = self.lost_overflow.get(s, 0) + n
            return
        self.buffered[s] = self.buffered.get(s, 0) + n
        dq.append(pkt)
        self.backlog_packets += 1
        self.engine.busy.add(self)

    def select(self, egress: int, ring: int):
        """Pick the packet to label on `egress` this slot, or None.

        Strict priority first; at equal priority a pending retransmission
        sticks, otherwise round-robin across destinations resumes after
        the last served one.
        """
        retry = self.retry[egress]
        retry_prio = retry.priority if retry is not None else 99
        for p in PRIORITIES:
            if p >= retry_prio:
                return retry
            qmap = self.queues[p]
            if not qmap:
                continue
            last = self.rr_last.get((egress, p), 0)
            best = None
            best_dst = 0
            best_rank = ring
            for (dst, eg), dq in qmap.items():
                if eg != egress:
                    continue
                rank = (dst - last - 1) % ring
                if rank < best_rank:
                    best, best_rank = dq, rank
                    best_dst = dst
            if best is not None:
                self.rr_last[(egress, p)] = best_dst
                return best[0]
        return None

    def pop_head(self, pkt: OpticalPacket):
        qmap = self.queues[pkt.priority]
        key = (pkt.dst, pkt.egress)
        dq = qmap[key]
        out = dq.popleft()
        if out is not pkt:
            raise ProtocolViolation("verdict applied to a non-head packet")
        if not dq:
            del qmap[key]
        self.backlog_packets -= 1
        if self.retry[pkt.egress] is pkt:
            self.retry[pkt.egress] = None


class OpticalSwitch:
    """Bufferless space switch: permits plus per-output round-robin."""

    def __init__(self, key: int, kind: NodeKind, radix: int):
        self.key = key
        self.kind = kind
        self.radix = radix
        self.permits: set = set()      # (slice, in_port, out_port)
        self.rr_next: dict = {}        # out_port -> next preferred in_port
        self.grants: dict = {}         # (out_port, in_port) -> count
        self.nack_contention: dict = {}  # per slice
        self.nack_no_route: dict = {}

    def add_permit(self, slice_id: int, in_port: int, out_port: int):
        self.permits.add((slice_id, in_port, out_port))

    def remove_permit(self, slice_id: int, in_port: int, out_port: int):
        self.permits.discard((slice_id, in_port, out_port))

    def remove_flow(self, slice_id: int):
        self.permits = {p for p in self.permits if p[0] != slice_id}


class Engine:
    """Owns devices, the clock, and the slot loop."""

    def __init__(self, grid: Grid, params: DataPlaneParams | None = None):
        self.grid = grid
        self.params = params or DataPlaneParams()
        self.clock = EventQueue()
        self.slot_ns = self.params.slot_ns
        self.hop_ns = 2 * grid.config.segment_ns
        self.txrx_ns = grid.config.tx_rx_processing_ns
        self.tors: dict[int, ToR] = {}
        self.switches: dict[int, OpticalSwitch] = {}
        self.sources: list = []          # filled by the runner
        self.busy: set[ToR] = set()
        self.pending_arrivals: list = []  # (arrive_ns, ToR, OpticalPacket)
        self.slot_index = 0
        self.inflight: dict = {}          # slice -> frames on fiber
        self.labels_emitted = 0
        self.grants = 0
        self.nacks_contention = 0
        self.nacks_no_route = 0
        self.min_latency_ns = float("inf")
        self.reservoirs: dict = {}        # slice -> sampler with .add()
        self.trace_labels: list = []      # (slot, tor, egress, prio, best_prio)
        self.trace_grants: list = []      # (slot, switch, out, in)
        self._build()

    def _build(self):
        g = self.grid
        for sw in g.switches:
            key = g.node_key(sw)
            self.switches[key] = OpticalSwitch(key, sw.kind, g.switch_radix(sw))
        for node in g.tors:
            key = g.node_key(node)
            tor = ToR(key, self)
            self.tors[key] = tor
            for egress in (TOR_PORT_IS, TOR_PORT_ES):
                sw = g.tor_neighbor(node, egress)
                sw_key = g.node_key(sw)
                tor.switch_for[egress] = self.switches[sw_key]
                tor.in_port_at[egress] = g.switch_port_of(sw, node)
                for other in g.tors:
                    if other == node:
                        continue
                    dst = g.tor_index(other)
                    out = g.switch_out_port(sw, other)
                    tor.out_port[(egress, dst)] = out
                    tor.next_tor[(egress, dst)] = g.node_key(g.tor_on_port(sw, out))
            for other in g.tors:
                if other != node:
                    tor.default_egress[g.tor_index(other)] = g.default_egress(node, other)
        self._ring = g.n_tors + 1

    # --- main loop -----------------------------------------------------------

    def run_until(self, t_end_ns: int, generate_until_ns: int | None = None):
        """Advance slot by slot to t_end_ns (a slot multiple)."""
        gen_end = t_end_ns if generate_until_ns is None else generate_until_ns
        slot = self.slot_ns
        clock = self.clock
        t = clock.now
        if t % slot:
            raise ProtocolViolation("clock not aligned to a slot boundary")
        while t < t_end_ns:
            if self.pending_arrivals:
                self._deliver_arrivals()
            clock.run_due(t)
            limit = t if t <= gen_end else gen_end
            for src in self.sources:
                if src.next_ns < limit:
                    src.pump(limit)
            if self.busy:
                self._slot(t)
            self.slot_index += 1
            if self.params.checkpoint_slots and \
                    self.slot_index % self.params.checkpoint_slots == 0:
                self.audit_conservation()
            t += slot
            if not self.busy and not self.pending_arrivals:
                t = self._fast_forward(t, t_end_ns, gen_end)
        clock.run_due(t_end_ns)

    def _fast_forward(self, t: int, t_end_ns: int, gen_end: int) -> int:
        slot = self.slot_ns
        nxt = t_end_ns
        ev = self.clock.peek_time()
        if ev is not None and ev < nxt:
            nxt = ev
        for src in self.sources:
            if src.next_ns < gen_end and src.next_ns < nxt:
                nxt = src.next_ns
        if nxt <= t:
            return t
        skipped = int(nxt - t) // slot
        if skipped:
            self.slot_index += skipped
            t += skipped * slot
        return t

    def drain(self, max_slots: int = 2_000_000):
        """Run extra slots with generation stopped until nothing is queued
        or flying; conservation then closes to generated = delivered + lost."""
        stop_gen = end = self.clock.now
        for _ in range(max_slots):
            if (not self.busy and not self.pending_arrivals
                    and not any(self.inflight.values())):
                return
            end += self.slot_ns
            self.run_until(end, generate_until_ns=stop_gen)
        raise ProtocolViolation("backlog failed to drain")

    def _deliver_arrivals(self):
        arrivals, self.pending_arrivals = self.pending_arrivals, []
        txrx = self.txrx_ns
        capacity = self.params.voq_capacity
        for arr_ns, tor, pkt in arrivals:
            s = pkt.slice_id
            n = len(pkt.frames)
            self.inflight[s] -= n
            if tor.key == pkt.dst:
                base = arr_ns + txrx
                lsum = 0.0
                mn = self.min_latency_ns
                res = self.reservoirs.get(s)
                for f in pkt.frames:
                    lat = base - f.created_ns
                    lsum += lat
                    if lat < mn:
                        mn = lat
                    if res is not None:
                        res.add(lat)
                self.min_latency_ns = mn
                tor.delivered[s] = tor.delivered.get(s, 0) + n
                tor.lat_sum[s] = tor.lat_sum.get(s, 0.0) + lsum
                tor.lat_cnt[s] = tor.lat_cnt.get(s, 0) + n
            else:
                tor.enqueue_transit(pkt, capacity)

    def _slot(self, t: int):
        params = self.params
        ring = self._ring
        labels_by_switch: dict = {}
        for tor in sorted(self.busy, key=lambda d: d.key):
            if tor.assembly:
                tor.flush_assembly(params.payload_bytes, params.voq_capacity)
            if not tor.backlog_packets:
                continue
            for egress in (TOR_PORT_IS, TOR_PORT_ES):
                pkt = tor.select(egress, ring)
                if pkt is None:
                    continue
                sw = tor.switch_for[egress]
                label = (tor.in_port_at[egress], tor.out_port[(egress, pkt.dst)],
                         pkt.priority, pkt.slice_id, tor, egress, pkt)
                labels_by_switch.setdefault(sw, []).append(label)
                self.labels_emitted += 1
                if params.trace:
                    best = next(p for p in PRIORITIES
                                if any(k[1] == egress for k in tor.queues[p]))
                    self.trace_labels.append(
                        (self.slot_index, tor.key, egress, pkt.priority, best))
        if labels_by_switch:
            self._arbitrate(labels_by_switch, t)
        for tor in [d for d in self.busy
                    if not d.backlog_packets and not d.assembly]:
            self.busy.discard(tor)

    def _arbitrate(self, labels_by_switch: dict, t: int):
        trace = self.params.trace
        arrive_ns = t + self.hop_ns
        for sw, labels in labels_by_switch.items():
            seen_in = set()
            for label in labels:
                if label[0] in seen_in:
                    raise ProtocolViolation(
                        f"two labels on input port {label[0]} of switch {sw.key}")
                seen_in.add(label[0])
            permits = sw.permits
            by_out: dict = {}
            for label in labels:
                if (label[3], label[0], label[1]) in permits:
                    by_out.setdefault(label[1], []).append(label)
                else:
                    self._nack_no_route(label)
            for out_port, cands in by_out.items():
                if len(cands) == 1:
                    winner = cands[0]
                else:
                    ptr = sw.rr_next.get(out_port, 1)
                    radix = sw.radix
                    winner = min(cands, key=lambda c: (c[2], (c[0] - ptr) % radix))
                    for label in cands:
                        if label is not winner:
                            self._nack_contention(sw, label)
                sw.rr_next[out_port] = winner[0] % sw.radix + 1
                sw.grants[(out_port, winner[0])] = \
                    sw.grants.get((out_port, winner[0]), 0) + 1
                self._grant(winner, arrive_ns)
                if trace:
                    self.trace_grants.append(
                        (self.slot_index, sw.key, out_port, winner[0]))

    def _grant(self, label, arrive_ns: int):
        tor, egress, pkt = label[4], label[5], label[6]
        tor.pop_head(pkt)
        s = pkt.slice_id
        n = len(pkt.frames)
        tor.buffered[s] -= n
        self.inflight[s] = self.inflight.get(s, 0) + n
        pkt.arrive_ns = arrive_ns
        next_tor = self.tors[tor.next_tor[(egress, pkt.dst)]]
        self.pending_arrivals.append((arrive_ns, next_tor, pkt))
        self.grants += 1

    def _nack_contention(self, sw: OpticalSwitch, label):
        tor, egress, pkt = label[4], label[5], label[6]
        tor.retry[egress] = pkt
        s = pkt.slice_id
        sw.nack_contention[s] = sw.nack_contention.get(s, 0) + 1
        self.nacks_contention += 1

    def _nack_no_route(self, label):
        tor, egress, pkt = label[4], label[5], label[6]
        sw = tor.switch_for[egress]
        s = pkt.slice_id
        sw.nack_no_route[s] = sw.nack_no_route.get(s, 0) + 1
        self.nacks_no_route += 1
        tor.pop_head(pkt)
        n = len(pkt.frames)
        tor.buffered[s] -= n
        tor.lost_no_route[s] = tor.lost_no_route.get(s, 0) + n

    # --- accounting -----------------------------------------------------------

    def slice_totals(self) -> dict:
        """Exact frame accounting per slice across all devices."""
        out: dict = {}
        for tor in self.tors.values():
            for name in ("generated", "delivered", "lost_overflow",
                         "lost_no_route", "buffered"):
                for s, v in getattr(tor, name).items():
                    out.setdefault(s, dict.fromkeys(
                        ("generated", "delivered", "lost_overflow",
                         "lost_no_route", "buffered", "inflight",
                         "lat_sum", "lat_cnt"), 0))[name] += v
            for s, v in tor.lat_sum.items():
                out[s]["lat_sum"] += v
            for s, v in tor.lat_cnt.items():
                out[s]["lat_cnt"] += v
        for s, v in self.inflight.items():
            if v:
                out.setdefault(s, dict.fromkeys(
                    ("generated", "delivered", "lost_overflow", "lost_no_route",
                     "buffered", "inflight", "lat_sum", "lat_cnt"), 0))
                out[s]["inflight"] += v
        # frames sitting in unflushed assembly buffers are part of "buffered"
        return out

    def audit_conservation(self):
        for s, tot in self.slice_totals().items():
            balance = (tot["delivered"] + tot["lost_overflow"]
                       + tot["lost_no_route"] + tot["buffered"] + tot["inflight"])
            if balance != tot["generated"]:
                raise ProtocolViolation(
                    f"slice {s} conservation broken at slot {self.slot_index}: "
                    f"generated={tot['generated']} accounted={balance}")

    def verdict_balance(self) -> tuple[int, int]:
        """(labels emitted, verdicts returned); always equal."""
        return (self.labels_emitted,
                self.grants + self.nacks_contention + self.nacks_no_route)
