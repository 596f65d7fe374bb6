r"""OPSquare fabric model: ToRs interconnected by two orthogonal switch planes.

Every rack's ToR has exactly two bidirectional optical links: one to the
intra-cluster switch (IS) of its cluster, one to the inter-cluster switch
(ES) shared by all racks with the same rack index. For 2 clusters x 4 racks:

      IS1                 IS2
    / | | \             / | | \
  T1 T2 T3 T4         T5 T6 T7 T8
   |  |  |  |          |  |  |  |
  ES1 ES2 ES3 ES4 ----'  |  |  |       (ESr connects ToR(c,r) for all c)
    `--------------------+--+--'

Intra-cluster traffic crosses one IS; inter-cluster traffic crosses an
ES and an IS in either order, relayed by the ToR where the planes meet.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

from .errors import ConfigError


class NodeKind(IntEnum):
    # values double as the wire encoding of device_kind
    TOR = 0
    IS = 1
    ES = 2


# ToR egress ports (the two optical links of every ToR)
TOR_PORT_IS = 1
TOR_PORT_ES = 2


@dataclass(frozen=True, order=True)
class NodeId:
    """Identifies a device. Indices are 1-based; unused coordinate is 0."""

    kind: NodeKind
    cluster: int
    rack: int

    @staticmethod
    def tor(cluster: int, rack: int) -> "NodeId":
        return NodeId(NodeKind.TOR, cluster, rack)

    @staticmethod
    def intra_switch(cluster: int) -> "NodeId":
        return NodeId(NodeKind.IS, cluster, 0)

    @staticmethod
    def inter_switch(rack: int) -> "NodeId":
        return NodeId(NodeKind.ES, 0, rack)

    def __str__(self) -> str:
        if self.kind == NodeKind.TOR:
            return f"ToR(c{self.cluster},r{self.rack})"
        if self.kind == NodeKind.IS:
            return f"IS{self.cluster}"
        return f"ES{self.rack}"


@dataclass(frozen=True)
class TopologyConfig:
    n_clusters: int = 2
    racks_per_cluster: int = 4
    servers_per_rack: int = 4
    link_rate_bps: int = 10_000_000_000
    fiber_length_m: float = 14.0
    propagation_ns_per_m: float = 5.0
    tx_rx_processing_ns: float = 163.5
    sync_jitter_ns: float = 3.103

    def __post_init__(self):
        for name in ("n_clusters", "racks_per_cluster", "servers_per_rack"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.link_rate_bps <= 0:
            raise ConfigError("link_rate_bps must be positive")
        if self.fiber_length_m <= 0 or self.propagation_ns_per_m <= 0:
            raise ConfigError("fiber geometry must be positive")

    @property
    def segment_ns(self) -> int:
        """One-way propagation over a single ToR-switch fiber, whole ns."""
        return int(round(self.fiber_length_m * self.propagation_ns_per_m))

    @property
    def ns_per_byte(self) -> float:
        return 8e9 / self.link_rate_bps


class Path:
    """An ordered hop sequence from source ToR to destination ToR."""

    __slots__ = ("hops",)

    def __init__(self, hops: tuple[NodeId, ...]):
        self.hops = hops

    @property
    def switches(self) -> tuple[NodeId, ...]:
        return tuple(h for h in self.hops if h.kind != NodeKind.TOR)

    @property
    def relay_tors(self) -> tuple[NodeId, ...]:
        return tuple(h for h in self.hops[1:-1] if h.kind == NodeKind.TOR)

    @property
    def n_segments(self) -> int:
        return len(self.hops) - 1

    def links(self) -> list[tuple[NodeId, NodeId]]:
        return [(self.hops[i], self.hops[i + 1]) for i in range(len(self.hops) - 1)]

    def __eq__(self, other) -> bool:
        return isinstance(other, Path) and self.hops == other.hops

    def __hash__(self) -> int:
        return hash(self.hops)

    def __repr__(self) -> str:
        return " -> ".join(str(h) for h in self.hops)


class Grid:
    """Derived structure for one TopologyConfig: ids, ports, paths, delays."""

    def __init__(self, config: TopologyConfig):
        self.config = config
        C, R = config.n_clusters, config.racks_per_cluster
        self.n_tors = C * R
        self.n_nodes = C * R + C + R
        self.tors = [NodeId.tor(c, r) for c in range(1, C + 1) for r in range(1, R + 1)]
        self.switches = [NodeId.intra_switch(c) for c in range(1, C + 1)] + [
            NodeId.inter_switch(r) for r in range(1, R + 1)
        ]
        self.nodes = self.tors + self.switches

    # --- index mapping -------------------------------------------------

    def tor_index(self, node: NodeId) -> int:
        """Flat 1-based ToR index: (cluster-1) * R + rack."""
        if node.kind != NodeKind.TOR:
            raise ConfigError(f"not a ToR: {node}")
        self._check_tor(node)
        return (node.cluster - 1) * self.config.racks_per_cluster + node.rack

    def tor_at(self, index: int) -> NodeId:
        R = self.config.racks_per_cluster
        if not 1 <= index <= self.n_tors:
            raise ConfigError(f"ToR index {index} out of range 1..{self.n_tors}")
        return NodeId.tor((index - 1) // R + 1, (index - 1) % R + 1)

    def node_key(self, node: NodeId) -> int:
        """Compact 1-based key over all devices: ToRs, then ISs, then ESs."""
        C, R = self.config.n_clusters, self.config.racks_per_cluster
        if node.kind == NodeKind.TOR:
            return self.tor_index(node)
        if node.kind == NodeKind.IS:
            if not 1 <= node.cluster <= C:
                raise ConfigError(f"no such switch: {node}")
            return C * R + node.cluster
        if not 1 <= node.rack <= R:
            raise ConfigError(f"no such switch: {node}")
        return C * R + C + node.rack

    def node_name(self, key: int) -> str:
        """Short CSV-safe name for a device key: ToR5, IS2, ES3."""
        C, R = self.config.n_clusters, self.config.racks_per_cluster
        if 1 <= key <= C * R:
            return f"ToR{key}"
        if key <= C * R + C:
            return f"IS{key - C * R}"
        if key <= self.n_nodes:
            return f"ES{key - C * R - C}"
        raise ConfigError(f"no device with key {key}")

    def _check_tor(self, node: NodeId):
        if not (1 <= node.cluster <= self.config.n_clusters
                and 1 <= node.rack <= self.config.racks_per_cluster):
            raise ConfigError(f"no such ToR: {node}")

    # --- ports ----------------------------------------------------------

    def switch_radix(self, sw: NodeId) -> int:
        if sw.kind == NodeKind.IS:
            return self.config.racks_per_cluster
        if sw.kind == NodeKind.ES:
            return self.config.n_clusters
        raise ConfigError(f"not a switch: {sw}")

    def switch_port_of(self, sw: NodeId, tor: NodeId) -> int:
        """Port of `sw` that faces `tor`, or raise if not attached."""
        self._check_tor(tor)
        if sw.kind == NodeKind.IS and sw.cluster == tor.cluster:
            return tor.rack
        if sw.kind == NodeKind.ES and sw.rack == tor.rack:
            return tor.cluster
        raise ConfigError(f"{tor} is not attached to {sw}")

    def tor_on_port(self, sw: NodeId, port: int) -> NodeId:
        if sw.kind == NodeKind.IS:
            if not 1 <= port <= self.config.racks_per_cluster:
                raise ConfigError(f"{sw} has no port {port}")
            return NodeId.tor(sw.cluster, port)
        if sw.kind == NodeKind.ES:
            if not 1 <= port <= self.config.n_clusters:
                raise ConfigError(f"{sw} has no port {port}")
            return NodeId.tor(port, sw.rack)
        raise ConfigError(f"not a switch: {sw}")

    def switch_out_port(self, sw: NodeId, dst: NodeId) -> int:
        """Output port a packet for ToR `dst` must request at `sw`.

        Purely topological: an IS reaches rack index r on port r, an ES
        reaches cluster c on port c. A hop over an IS requires the
        destination be in its cluster (directly for the final hop, or the
        relay ToR which shares the destination's rack index for an ES hop).
        """
        if sw.kind == NodeKind.IS:
            return dst.rack
        if sw.kind == NodeKind.ES:
            return dst.cluster
        raise ConfigError(f"not a switch: {sw}")

    def tor_neighbor(self, tor: NodeId, egress_port: int) -> NodeId:
        if egress_port == TOR_PORT_IS:
            return NodeId.intra_switch(tor.cluster)
        if egress_port == TOR_PORT_ES:
            return NodeId.inter_switch(tor.rack)
        raise ConfigError(f"ToR has no egress port {egress_port}")

    # --- paths ----------------------------------------------------------

    def paths(self, src: NodeId, dst: NodeId) -> list[Path]:
        """All candidate paths src -> dst, ES-first ordered before IS-first.

        Intra-cluster pairs have one path over their IS. Inter-cluster
        pairs have two switch-disjoint paths, except when both racks share
        the rack index: the relay ToR of either order collapses onto an
        endpoint, leaving the single direct hop over their common ES.
        """
        self._check_tor(src)
        self._check_tor(dst)
        if src == dst:
            raise ConfigError("source and destination ToR are identical")
        if src.cluster == dst.cluster:
            return [Path((src, NodeId.intra_switch(src.cluster), dst))]
        if src.rack == dst.rack:
            return [Path((src, NodeId.inter_switch(src.rack), dst))]
        es_first = Path((
            src,
            NodeId.inter_switch(src.rack),
            NodeId.tor(dst.cluster, src.rack),
            NodeId.intra_switch(dst.cluster),
            dst,
        ))
        is_first = Path((
            src,
            NodeId.intra_switch(src.cluster),
            NodeId.tor(src.cluster, dst.rack),
            NodeId.inter_switch(dst.rack),
            dst,
        ))
        return [es_first, is_first]

    def default_egress(self, src: NodeId, dst: NodeId) -> int:
        """Egress link a ToR uses for `dst` absent any installed route.

        Same cluster goes over the IS; anything else leaves on the ES link
        (for inter-cluster pairs this is the first leg of the ES-first
        path, or the direct ES hop when rack indices match). The same rule
        applied at a relay ToR always yields the correct second leg.
        """
        return TOR_PORT_IS if src.cluster == dst.cluster else TOR_PORT_ES

    def propagation_ns(self, path: Path) -> int:
        return path.n_segments * self.config.segment_ns

    # --- sanity ----------------------------------------------------------

    def fiber_count(self) -> int:
        """Bidirectional fiber pairs in the fabric (2 per ToR)."""
        return 2 * self.n_tors

    def latency_floor_ns(self) -> float:
        """Smallest possible end-to-end frame latency: one-switch
        propagation plus transceiver processing."""
        return 2 * self.config.segment_ns + self.config.tx_rx_processing_ns


def slot_capacity_frames(slot_ns: int, config: TopologyConfig, max_frame: int = 1518) -> int:
    """Frames of worst-case size that fit one slot's payload at line rate."""
    return math.floor(slot_ns / (max_frame * config.ns_per_byte))
