from __future__ import annotations

import pytest

from opsquare_sim.dataplane import (
    DataPlaneParams,
    Engine,
    Frame,
    OpticalPacket,
    PRIORITIES,
)
from opsquare_sim.errors import ProtocolViolation
from opsquare_sim.topology import TOR_PORT_ES, TOR_PORT_IS

from fabric import authorize_pair, authorize_path, inject, make_engine, totals

SLOT = 1280


def run_slots(engine, n, **kw):
    engine.run_until(engine.clock.now + n * SLOT, **kw)


# --- aggregation ------------------------------------------------------------


def test_frames_for_different_destinations_use_different_voqs():
    _, eng = make_engine()
    inject(eng, 0, 1, src=1, dst=2)
    inject(eng, 0, 1, src=1, dst=3)
    tor = eng.tors[1]
    tor.flush_assembly(1536, 64)
    qmap = tor.queues[4]
    assert sorted(qmap) == [(2, TOR_PORT_IS), (3, TOR_PORT_IS)]
    assert all(len(dq) == 1 for dq in qmap.values())


def test_same_voq_frames_aggregate_up_to_payload():
    _, eng = make_engine()
    inject(eng, 0, 1, src=1, dst=2, size=700, n=3)
    tor = eng.tors[1]
    tor.flush_assembly(1536, 64)
    packets = list(tor.queues[4][(2, TOR_PORT_IS)])
    assert [len(p.frames) for p in packets] == [2, 1]
    assert packets[0].size_bytes == 1400


def test_oversize_single_frame_still_ships_alone():
    _, eng = make_engine()
    inject(eng, 0, 1, src=1, dst=2, size=1518, n=2)
    tor = eng.tors[1]
    tor.flush_assembly(1536, 64)
    assert [len(p.frames) for p in tor.queues[4][(2, TOR_PORT_IS)]] == [1, 1]


def test_packet_records_first_frame_timestamp():
    _, eng = make_engine()
    tor = eng.tors[1]
    tor.accept_frame(Frame(64, 10.0, 1, 1, 2))
    tor.accept_frame(Frame(64, 20.0, 1, 1, 2))
    tor.flush_assembly(1536, 64)
    assert tor.queues[4][(2, TOR_PORT_IS)][0].created_ns == 10.0


# --- delivery, latency, conservation ----------------------------------------


def test_single_hop_delivery_and_latency():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=3)
    inject(eng, 0, 1, src=1, dst=3, size=64)
    run_slots(eng, 3)
    t = totals(eng, 1)
    assert t["delivered"] == 1
    assert t["generated"] == 1
    # emitted at slot 0, lands 140 ns later, plus transceiver processing
    assert eng.min_latency_ns == pytest.approx(140 + 163.5)
    assert eng.verdict_balance() == (1, 1)


def test_two_leg_delivery_via_relay():
    grid, eng = make_engine()
    path = authorize_path(eng, grid, 1, src=1, dst=8)  # over ES1, relay ToR5
    assert [str(h) for h in path.hops[1:-1]] == ["ES1", "ToR(c2,r1)", "IS2"]
    inject(eng, 0, 1, src=1, dst=8, size=64)
    run_slots(eng, 4)
    t = totals(eng, 1)
    assert t["delivered"] == 1
    assert t["buffered"] == 0 and t["inflight"] == 0
    # leg 1 emitted at slot 0, relay turns it around at the next boundary,
    # so the first 140 ns hop is absorbed in the relay wait
    assert eng.min_latency_ns == pytest.approx(SLOT + 140 + 163.5)
    assert eng.tors[5].lost_overflow.get(1, 0) == 0


def test_conservation_audit_runs_and_closes():
    grid, eng = make_engine(checkpoint_slots=2)
    authorize_pair(eng, grid, 1, 1, 8)
    for k in range(40):
        eng.clock.schedule(k * SLOT + 7, inject, eng, k * SLOT + 7, 1, 1, 8, 1000, 2)
    run_slots(eng, 60)
    eng.drain()
    eng.audit_conservation()
    t = totals(eng, 1)
    assert t["generated"] == 80
    assert t["delivered"] == 80
    assert t["buffered"] == 0 and t["inflight"] == 0


def test_audit_detects_corruption():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=3)
    inject(eng, 0, 1, src=1, dst=3)
    run_slots(eng, 3)
    eng.tors[3].delivered[1] += 1
    with pytest.raises(ProtocolViolation):
        eng.audit_conservation()


# --- priority scheduling ------------------------------------------------------


def test_strict_priority_on_shared_link():
    grid, eng = make_engine(trace=True)
    authorize_path(eng, grid, 1, src=1, dst=3, priority=1)
    authorize_path(eng, grid, 2, src=1, dst=3, priority=3)
    inject(eng, 0, 1, src=1, dst=3, size=1400, n=5)
    inject(eng, 0, 2, src=1, dst=3, size=1400, n=5)
    run_slots(eng, 12)
    eng.drain()
    # every emitted label carried the best available priority on its link
    assert eng.trace_labels, "expected emissions to be traced"
    assert all(prio == best for (_, _, _, prio, best) in eng.trace_labels)
    # and the high-priority flow never saw the low one ahead of it
    first_p3 = next(i for i, r in enumerate(eng.trace_labels) if r[3] == 3)
    assert all(r[3] == 1 for r in eng.trace_labels[:first_p3])


def test_round_robin_across_destinations_at_equal_priority():
    grid, eng = make_engine(trace=True)
    authorize_path(eng, grid, 1, src=1, dst=2, priority=2)
    authorize_path(eng, grid, 1, src=1, dst=3, priority=2)
    inject(eng, 0, 1, src=1, dst=2, size=1400, n=6)
    inject(eng, 0, 1, src=1, dst=3, size=1400, n=6)
    run_slots(eng, 12)
    eng.drain()
    # labels alternate between the two backlogged destinations
    dsts = [eng.tors[1].out_port[(TOR_PORT_IS, d)] for d in (2, 3)]
    outs = [r for r in eng.trace_grants]
    assert len(outs) == 12
    granted_ports = [o[2] for o in outs]
    assert granted_ports[:4] in ([dsts[0], dsts[1]] * 2, [dsts[1], dsts[0]] * 2)
    assert abs(granted_ports.count(dsts[0]) - granted_ports.count(dsts[1])) <= 1


def test_switch_grants_highest_priority_label():
    # three inputs contend for one output; priorities 1, 2, 4
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=5, dst=6, priority=1)
    authorize_path(eng, grid, 2, src=7, dst=6, priority=2)
    authorize_path(eng, grid, 3, src=8, dst=6, priority=4)
    for s, src in ((1, 5), (2, 7), (3, 8)):
        inject(eng, 0, s, src=src, dst=6, size=1400)
    run_slots(eng, 1)
    assert eng.grants == 1 and eng.nacks_contention == 2
    assert totals(eng, 1)["inflight"] == 1  # priority 1 won the port


def test_nack_contention_retries_next_slot():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=3, priority=2)
    authorize_path(eng, grid, 2, src=2, dst=3, priority=2)
    inject(eng, 0, 1, src=1, dst=3)
    inject(eng, 0, 2, src=2, dst=3)
    run_slots(eng, 1)
    assert eng.grants == 1 and eng.nacks_contention == 1
    run_slots(eng, 1)
    assert eng.grants == 2  # loser went through on the very next slot
    eng.drain()
    assert totals(eng, 1)["delivered"] == totals(eng, 2)["delivered"] == 1


def test_switch_round_robin_alternates_between_persistent_inputs():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=3, priority=2)
    authorize_path(eng, grid, 2, src=2, dst=3, priority=2)
    inject(eng, 0, 1, src=1, dst=3, size=1400, n=30)
    inject(eng, 0, 2, src=2, dst=3, size=1400, n=30)
    run_slots(eng, 40)
    sw = eng.tors[1].switch_for[TOR_PORT_IS]
    per_input = [sw.grants.get((3, p), 0) for p in (1, 2)]
    assert sum(per_input) == 40
    assert abs(per_input[0] - per_input[1]) <= 1


def test_retry_preempted_by_higher_priority_then_resumes():
    grid, eng = make_engine(trace=True)
    authorize_path(eng, grid, 1, src=1, dst=3, priority=3)
    authorize_path(eng, grid, 2, src=2, dst=3, priority=3)
    authorize_path(eng, grid, 3, src=1, dst=4, priority=1)
    inject(eng, 0, 1, src=1, dst=3)
    inject(eng, 0, 2, src=2, dst=3)
    run_slots(eng, 1)
    loser_slice = 1 if totals(eng, 2).get("inflight") else 2
    # high-priority burst shows up at the loser's ToR
    loser_tor = 1 if loser_slice == 1 else 2
    if loser_tor == 1:
        inject(eng, SLOT, 3, src=1, dst=4, size=1400, n=2)
    run_slots(eng, 6)
    eng.drain()
    assert all(prio == best for (_, _, _, prio, best) in eng.trace_labels)
    assert totals(eng, loser_slice)["delivered"] == 1


# --- loss paths ---------------------------------------------------------------


def test_no_route_labels_drop_at_source():
    grid, eng = make_engine()
    tor = eng.tors[1]
    tor.slice_priority[9] = 2
    inject(eng, 0, 9, src=1, dst=3, n=4)  # no permits anywhere
    run_slots(eng, 2)
    t = totals(eng, 9)
    assert t["lost_no_route"] == 4
    assert t["delivered"] == 0 and t["buffered"] == 0
    assert eng.nacks_no_route >= 1
    assert eng.verdict_balance()[0] == eng.verdict_balance()[1]


def test_voq_overflow_drops_whole_packets():
    grid, eng = make_engine(voq_capacity=2)
    authorize_path(eng, grid, 1, src=1, dst=3)
    inject(eng, 0, 1, src=1, dst=3, size=1400, n=5)
    eng.tors[1].flush_assembly(1536, 2)
    t = totals(eng, 1)
    assert t["lost_overflow"] == 3
    assert t["buffered"] == 2


def test_relay_overflow_counts_at_relay():
    grid, eng = make_engine(voq_capacity=1)
    authorize_path(eng, grid, 1, src=1, dst=8)          # relay is ToR5
    authorize_path(eng, grid, 2, src=6, dst=8, priority=1)
    # priority-1 traffic from ToR6 keeps winning the IS2 port toward ToR8,
    # so the relay's packet sits in its single-slot VOQ and the next
    # arrival overflows there, not at the source
    for k in range(10):
        eng.clock.schedule(k * SLOT + 7, inject, eng, k * SLOT + 7, 2, 6, 8, 1400, 1)
    eng.clock.schedule(7, inject, eng, 7, 1, 1, 8, 1400, 1)
    eng.clock.schedule(SLOT + 7, inject, eng, SLOT + 7, 1, 1, 8, 1400, 1)
    run_slots(eng, 8)
    assert eng.tors[5].lost_overflow.get(1, 0) == 1
    assert totals(eng, 2)["lost_overflow"] == 0


# --- LUT edge handling -----------------------------------------------------------


def test_route_delete_falls_back_then_no_route():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=3)
    eng.tors[1].delete_route(1)  # wipe all slice state at the ToR
    sw = eng.tors[1].switch_for[TOR_PORT_IS]
    sw.remove_flow(1)
    inject(eng, 0, 1, src=1, dst=3)
    run_slots(eng, 2)
    assert totals(eng, 1)["lost_no_route"] == 1


def test_route_add_and_delete_specific_out():
    _, eng = make_engine()
    tor = eng.tors[1]
    tor.add_route(7, 8, TOR_PORT_ES, wavelength=3)
    tor.add_route(7, 8, TOR_PORT_IS, wavelength=3)
    assert tor.routes[(7, 8)][0] == (TOR_PORT_IS, TOR_PORT_ES)
    tor.delete_route(7, 8, TOR_PORT_ES)
    assert tor.routes[(7, 8)][0] == (TOR_PORT_IS,)
    tor.delete_route(7, 8, TOR_PORT_IS)
    assert (7, 8) not in tor.routes


def test_lut_update_lands_between_slots():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=8, path_index=0)

    def swap_to_is_first():
        authorize_path(eng, grid, 1, src=1, dst=8, path_index=1, install_route=False)
        eng.tors[1].replace_route(1, 8, TOR_PORT_IS, wavelength=1)

    eng.clock.schedule(5 * SLOT + 3, swap_to_is_first)
    for k in range(12):
        eng.clock.schedule(k * SLOT + 7, inject, eng, k * SLOT + 7, 1, 1, 8, 1400, 1)
    run_slots(eng, 14)
    eng.drain()
    t = totals(eng, 1)
    assert t["generated"] == 12 and t["delivered"] == 12
    # both relays carried traffic: ToR5 before the swap, ToR4 after
    assert eng.tors[5].buffered.get(1) == 0 and eng.tors[4].buffered.get(1) == 0


def test_two_labels_on_one_input_port_is_a_violation():
    grid, eng = make_engine()
    sw = eng.tors[1].switch_for[TOR_PORT_IS]
    pkt = OpticalPacket(1, 1, 3, 2, 0, [Frame(64, 0.0, 1, 1, 3)], 64)
    pkt.egress = TOR_PORT_IS
    label = (1, 3, 2, 1, eng.tors[1], TOR_PORT_IS, pkt)
    with pytest.raises(ProtocolViolation):
        eng._arbitrate({sw: [label, label]}, 0)


# --- determinism ------------------------------------------------------------------


def _scripted_run():
    grid, eng = make_engine()
    authorize_pair(eng, grid, 1, 1, 8, priority=1)
    authorize_pair(eng, grid, 2, 2, 7, priority=2)
    for k in range(50):
        inject(eng, k * SLOT + 7, 1, src=1, dst=8, size=900 + (k % 3) * 100)
        inject(eng, k * SLOT + 9, 2, src=2, dst=7, size=700)
        if k % 4 == 0:
            inject(eng, k * SLOT + 11, 2, src=7, dst=2, size=1400)
    run_slots(eng, 80)
    eng.drain()
    return eng.slice_totals(), {k: dict(s.grants) for k, s in eng.switches.items()}


def test_identical_runs_produce_identical_state():
    assert _scripted_run() == _scripted_run()


def test_fast_forward_skips_idle_stretches():
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, src=1, dst=3)

    class Burst:
        next_ns = 400 * SLOT + 5

        def pump(self, until):
            if Burst.next_ns < until:
                inject(eng, Burst.next_ns, 1, src=1, dst=3)
                Burst.next_ns = 10**18

    eng.sources.append(Burst())
    eng.run_until(1000 * SLOT)
    assert totals(eng, 1)["delivered"] == 1
    assert eng.min_latency_ns < 2 * SLOT + 303.5
