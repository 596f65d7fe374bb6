"""Hand-wired engine setups shared by data-plane, control-plane and
acceptance tests: build a fabric, authorize a slice along a concrete
path, inject raw frames."""
from __future__ import annotations

from opsquare_sim.dataplane import DataPlaneParams, Engine, Frame
from opsquare_sim.topology import (
    TOR_PORT_IS,
    Grid,
    NodeKind,
    TopologyConfig,
)


def make_engine(C=2, R=4, **params):
    grid = Grid(TopologyConfig(n_clusters=C, racks_per_cluster=R))
    return grid, Engine(grid, DataPlaneParams(**params))


def authorize_path(engine: Engine, grid: Grid, slice_id: int, src: int, dst: int,
                   priority: int = 4, path_index: int = 0, install_route=True):
    """Install switch permits (and optionally the source route entry)
    along one candidate path between flat ToR indices."""
    path = grid.paths(grid.tor_at(src), grid.tor_at(dst))[path_index]
    hops = path.hops
    for i, hop in enumerate(hops):
        if hop.kind == NodeKind.TOR:
            continue
        sw = engine.switches[grid.node_key(hop)]
        sw.add_permit(slice_id,
                      grid.switch_port_of(hop, hops[i - 1]),
                      grid.switch_port_of(hop, hops[i + 1]))
    tor = engine.tors[src]
    tor.slice_priority[slice_id] = priority
    if install_route:
        first = hops[1]
        egress = TOR_PORT_IS if first.kind == NodeKind.IS else 2
        tor.add_route(slice_id, dst, egress, wavelength=slice_id)
    return path


def authorize_pair(engine, grid, slice_id, a, b, priority=4, path_index=0):
    authorize_path(engine, grid, slice_id, a, b, priority, path_index)
    authorize_path(engine, grid, slice_id, b, a, priority, path_index)


def inject(engine: Engine, created_ns, slice_id, src, dst, size=64, n=1):
    tor = engine.tors[src]
    for _ in range(n):
        tor.accept_frame(Frame(size, created_ns, slice_id, src, dst))


def totals(engine, slice_id):
    return engine.slice_totals().get(slice_id, {})
