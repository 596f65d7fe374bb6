"""Full-system acceptance checklist.

Each test here checks one advertised property of the finished simulator
at its stated tolerance, one test per property, so ``pytest -v`` prints a
single pass or fail line for each. The three bundled scenarios execute
once per session and most properties read their evidence off those runs;
the per-slot properties (arbitration order, grant fairness, the latency
floor) instead build small hand-wired fabrics with tracing enabled.

Exact properties use exact comparisons; calibration targets use the band
stated in the test. Nothing here re-implements the system under test:
every number is read back from traces, counters, exported rows or event
logs the simulator itself produced.
"""
from __future__ import annotations

import random
from random import Random

import pytest

from opsquare_sim import ofproto as ofp
from opsquare_sim.runner import export, run_scenario
from opsquare_sim.scenario import bundled
from opsquare_sim.topology import TOR_PORT_IS
from opsquare_sim.traffic import FrameSource

from fabric import authorize_path, inject, make_engine, totals
from genmsg import random_message

# Column positions in the exported row tuples (see runner/metrics headers).
SW_LOAD, SW_SLICE, SW_PRIO, SW_GEN = 0, 1, 2, 3
SW_LOST_OVF, SW_LOST_NR, SW_LOSS, SW_LAT = 5, 6, 7, 8
TS_REL, TS_SLICE, TS_WLOSS, TS_WLAT = 3, 4, 8, 9
TS_CDEL, TS_CNR, TS_CLOSS, TS_CLAT = 11, 13, 14, 15


@pytest.fixture(scope="session")
def fig7_result():
    """Priority sweep: 4 slices, 10 load points, 5 pooled seeds."""
    return run_scenario(bundled("fig7"))


@pytest.fixture(scope="session")
def fig5_result():
    """Live slice extension with a paired no-extension baseline, 2 seeds."""
    return run_scenario(bundled("fig5"))


@pytest.fixture(scope="session")
def fig9_result():
    """Statistics-triggered balancing with a paired frozen arm, 5 seeds."""
    return run_scenario(bundled("fig9"))


def _handles(*results):
    return [h for r in results for h in r.handles]


def _handle(result, label: str, seed: int):
    for h in result.handles:
        if h.label == label and h.seed == seed:
            return h
    raise AssertionError(f"no run {label!r} with seed {seed}")


def _series(rows, label: str, seed: int, slice_id: int):
    """Timeseries rows of one run arm and slice, in time order."""
    picked = [r for r in rows
              if r[0] == label and r[1] == seed and r[TS_SLICE] == slice_id]
    return sorted(picked, key=lambda r: r[2])


def _events(result, label: str, seed: int, kind: str):
    return [e for e in result.events
            if e[0] == label and e[1] == seed and e[4] == kind]


def _detail(detail: str) -> dict:
    return dict(kv.split("=", 1) for kv in detail.split("|"))


# --- 1: wire protocol ------------------------------------------------------

def test_criterion_01_codec_round_trip_and_goldens():
    """10_000 randomized messages survive encode/decode exactly, and the
    two pinned byte vectors (a feature reply advertising fast optical
    switching, a flow-mod carrying a wavelength) match bit for bit."""
    rng = random.Random(20260817)
    for _ in range(10_000):
        msg = random_message(rng)
        assert ofp.decode(ofp.encode(msg)) == msg

    reply = ofp.FeatureReply(xid=2, datapath_id=5, device_kind=1, n_ports=4,
                             capabilities=ofp.CAP_OPTICAL_FAST_SWITCHING)
    wire = "0102001700000002" "0000000000000005" "01" "0004" "00000001"
    assert ofp.encode(reply).hex() == wire
    assert ofp.decode(bytes.fromhex(wire)) == reply

    mod = ofp.FlowMod(xid=9, command=ofp.FlowModCommand.ADD, in_port=8,
                      flow_id=3, wavelength=2, output_port=1, priority=2)
    wire = "0103001700000009" "00" "0008" "00000003" "0002" "02" "000001" "0102"
    assert ofp.encode(mod).hex() == wire
    assert ofp.decode(bytes.fromhex(wire)) == mod
    print("criterion 01 codec round trip and goldens: PASS")


# --- 2: conservation --------------------------------------------------------

def test_criterion_02_frame_conservation_exact(fig7_result, fig5_result,
                                               fig9_result):
    """generated = delivered + buffered + in-flight + lost(overflow) +
    lost(no-route) for every slice of every bundled run, exactly. The
    engine also audited the same balance every checkpoint interval while
    the runs were live; a violation there raises and fails the fixture."""
    handles = _handles(fig7_result, fig5_result, fig9_result)
    assert len(handles) == 50 + 4 + 10
    for h in handles:
        eng = h.engine
        assert eng.params.checkpoint_slots > 0
        assert eng.slot_index >= eng.params.checkpoint_slots
        eng.audit_conservation()
        for s, t in eng.slice_totals().items():
            accounted = (t["delivered"] + t["buffered"] + t["inflight"]
                         + t["lost_overflow"] + t["lost_no_route"])
            assert accounted == t["generated"], (h.label, h.seed, s)
    # sweep runs drain before reporting, so their balance closes with
    # nothing left in queues or on fiber
    for h in fig7_result.handles:
        for t in h.engine.slice_totals().values():
            assert t["buffered"] == 0
            assert t["inflight"] == 0
    print("criterion 02 frame conservation exact: PASS")


# --- 3: lossless switches ---------------------------------------------------

def test_criterion_03_switches_lossless(fig7_result, fig5_result,
                                        fig9_result):
    """Every label a ToR emits receives exactly one verdict: a grant, a
    contention NACK or a no-route NACK. The per-switch verdict counters
    partition the emitted total with nothing unaccounted, so switches
    never swallow a packet; frames die only at ToR queues."""
    for h in _handles(fig7_result, fig5_result, fig9_result):
        eng = h.engine
        labels, verdicts = eng.verdict_balance()
        assert labels > 0
        assert labels == verdicts, (h.label, h.seed)
        by_switch = sum(
            sum(sw.grants.values()) + sum(sw.nack_contention.values())
            + sum(sw.nack_no_route.values())
            for sw in eng.switches.values())
        assert by_switch == labels, (h.label, h.seed)
    print("criterion 03 switches lossless: PASS")


# --- 4: priority arbitration ------------------------------------------------

def test_criterion_04_priority_arbitration_and_ordering(fig7_result):
    """Per slot, exactly: when several permitted labels contend for one
    switch output the grant goes to the numerically lowest priority
    present, never to a higher-numbered one. Checked on a traced fabric
    where ToRs of priority 1, 2 and 3 fight for the same intra-cluster
    output; the winner of every contended slot must carry the slot's
    minimum priority. Statistically: the bundled sweep keeps loss ratio
    and mean latency ordered slice 1 <= 2 <= 3 <= 4 at every load."""
    grid, eng = make_engine(trace=True)
    prio_of_in = {}
    is_key = None
    for slice_id, src, prio in ((1, 1, 1), (2, 2, 2), (3, 3, 3)):
        path = authorize_path(eng, grid, slice_id, src, 4, priority=prio)
        is_key = grid.node_key(path.hops[1])
        prio_of_in[grid.switch_port_of(path.hops[1], path.hops[0])] = prio
    offered = {1: 0.35, 2: 0.9, 3: 0.9}
    for slice_id, src in ((1, 1), (2, 2), (3, 3)):
        eng.sources.append(FrameSource(
            eng.tors[src], slice_id, src, {4: 1.0}, offered[src], 0.8,
            Random(40 + src), burst_frames=4.0))
    eng.run_until(20_000 * eng.params.slot_ns)

    candidates: dict = {}
    for slot, tor, egress, prio, _best in eng.trace_labels:
        if egress == TOR_PORT_IS:
            candidates.setdefault(slot, []).append(prio)
    winner = {slot: prio_of_in[in_port]
              for slot, sw, _out, in_port in eng.trace_grants if sw == is_key}
    contended = 0
    for slot, prios in candidates.items():
        if len(prios) < 2:
            continue
        contended += 1
        assert winner[slot] == min(prios), (slot, winner[slot], prios)
    assert contended >= 5_000
    # both dominance patterns actually occurred
    assert any(len(p) == 3 for p in candidates.values())
    assert any(len(p) >= 2 and min(p) == 2 for p in candidates.values())
    assert eng.nacks_contention > 0

    by_load: dict = {}
    for row in fig7_result.sweep:
        by_load.setdefault(row[SW_LOAD], {})[row[SW_SLICE]] = row
    assert len(by_load) == 10
    for load, rows in sorted(by_load.items()):
        assert all(rows[s][SW_PRIO] == s for s in (1, 2, 3, 4))
        losses = [rows[s][SW_LOSS] for s in (1, 2, 3, 4)]
        lats = [rows[s][SW_LAT] for s in (1, 2, 3, 4)]
        assert losses == sorted(losses), (load, losses)
        assert lats == sorted(lats), (load, lats)
    print("criterion 04 priority arbitration and ordering: PASS")


# --- 5: sweep calibration bands ---------------------------------------------

def test_criterion_05_sweep_calibration_bands(fig7_result):
    """Sweep calibration: the priority-1 slice loses nothing up to load
    0.7 (exact zero over more than 1e6 frames of evidence); the
    priority-4 slice loses 1..10% at load 0.4; mean latency at load 0.5
    sits in [2.4, 9.6] us for priority 1 and [19, 76] us for priority 4;
    the priority-4 latency CDF at load 0.5 overlaps [26, 90] us."""
    table = {(r[SW_LOAD], r[SW_SLICE]): r for r in fig7_result.sweep}
    loads = sorted({r[SW_LOAD] for r in fig7_result.sweep})
    assert len(loads) == 10
    for load in loads:
        point = sum(table[(load, s)][SW_GEN] for s in (1, 2, 3, 4))
        assert point >= 1_000_000, (load, point)
    low = [l for l in loads if l <= 0.7]
    assert sum(table[(l, 1)][SW_GEN] for l in low) >= 1_000_000
    for l in low:
        row = table[(l, 1)]
        assert row[SW_LOST_OVF] == 0 and row[SW_LOST_NR] == 0, l
        assert row[SW_LOSS] == 0.0, l
    assert 0.01 <= table[(0.4, 4)][SW_LOSS] <= 0.1
    assert 2.4 <= table[(0.5, 1)][SW_LAT] <= 9.6
    assert 19.0 <= table[(0.5, 4)][SW_LAT] <= 76.0
    tail = [v for load, s, _q, v in fig7_result.cdf if load == 0.5 and s == 4]
    assert tail
    assert min(tail) <= 90.0
    assert max(tail) >= 26.0
    print("criterion 05 sweep calibration bands: PASS")


# --- 6: latency floor -------------------------------------------------------

def test_criterion_06_latency_floor(fig7_result, fig5_result, fig9_result):
    """No delivered frame ever beats the physical floor of 303.5 ns (two
    70 m fiber segments plus transceiver processing). An uncontended
    single frame on an idle fabric lands within two slot times of the
    floor; every bundled run's global minimum stays at or above it."""
    grid, eng = make_engine()
    authorize_path(eng, grid, 1, 1, 5)
    inject(eng, 0, 1, 1, 5, size=64)
    eng.run_until(50 * eng.params.slot_ns)
    assert totals(eng, 1)["delivered"] == 1
    assert eng.min_latency_ns >= 303.5
    assert eng.min_latency_ns <= 303.5 + 2 * eng.params.slot_ns

    for h in _handles(fig7_result, fig5_result, fig9_result):
        assert h.engine.min_latency_ns >= 303.5, (h.label, h.seed)
    print("criterion 06 latency floor: PASS")


# --- 7: live slice extension ------------------------------------------------

def test_criterion_07_live_slice_extension(fig5_result):
    """Frames addressed to the not-yet-owned rack are refused with
    no-route NACKs before the extension commits and deliver afterwards;
    the commit wall time stays within 125 ms +- 10%; and the three
    untouched slices match the paired baseline run bit for bit."""
    period_ms = fig5_result.scenario.control.stats_period_ns / 1e6
    ts = fig5_result.timeseries
    for seed in fig5_result.seeds:
        ev = _events(fig5_result, "reconfigured", seed, "reconfigured")
        assert len(ev) == 1
        wall_ms = int(_detail(ev[0][5])["wall_ns"]) / 1e6
        assert 112.5 <= wall_ms <= 137.5, (seed, wall_ms)
        delta_rel = ev[0][3]

        rec = _series(ts, "reconfigured", seed, 1)
        base = _series(ts, "baseline", seed, 1)
        pre = [r for r in rec if r[TS_REL] <= delta_rel]
        assert pre and pre[-1][TS_CNR] > 0, seed
        post = [r for r in rec if r[TS_REL] >= delta_rel + period_ms]
        assert len(post) >= 3
        assert len({r[TS_CNR] for r in post}) == 1, seed
        bpost = [r for r in base if r[TS_REL] >= delta_rel + period_ms]
        assert bpost[-1][TS_CNR] > bpost[0][TS_CNR], seed
        assert rec[-1][TS_CDEL] > base[-1][TS_CDEL], seed

        rec_h = _handle(fig5_result, "reconfigured", seed)
        base_h = _handle(fig5_result, "baseline", seed)
        assert rec_h.engine.nacks_no_route > 0
        assert base_h.engine.nacks_no_route > 0
        assert rec_h.engine.tors[6].delivered.get(1, 0) > 0
        assert base_h.engine.tors[6].delivered.get(1, 0) == 0

        for s in (2, 3, 4):
            a = [(r[2], *r[5:]) for r in _series(ts, "reconfigured", seed, s)]
            b = [(r[2], *r[5:]) for r in _series(ts, "baseline", seed, s)]
            assert a and a == b, (seed, s)
        sum_rec = sorted(r[2:] for r in fig5_result.summary
                         if r[0] == "reconfigured" and r[1] == seed
                         and r[3] in (2, 3, 4))
        sum_base = sorted(r[2:] for r in fig5_result.summary
                          if r[0] == "baseline" and r[1] == seed
                          and r[3] in (2, 3, 4))
        assert sum_rec == sum_base, seed
    print("criterion 07 live slice extension: PASS")


# --- 8: statistics-triggered balancing ---------------------------------------

def test_criterion_08_load_balancing_trigger(fig9_result):
    """The balancer trips on the first statistics window whose loss ratio
    exceeds the slice threshold; after the split commits and one window
    settles, every remaining window shows loss below the threshold and
    mean latency below the slice target at full load, on all five seeds.
    The paired frozen arm never recovers: its windowed loss stays above
    the threshold throughout and its cumulative loss ratio and latency
    grow to the horizon (counter-ratio jitter bounded well below the
    signal)."""
    sc = fig9_result.scenario
    period_ms = sc.control.stats_period_ns / 1e6
    threshold = sc.slices[0].loss_threshold
    target_us = sc.slices[0].latency_target_us
    ts = fig9_result.timeseries
    for seed in fig9_result.seeds:
        trig = _events(fig9_result, "balanced", seed, "balance_triggered")
        assert len(trig) == 1, seed
        assert float(_detail(trig[0][5])["loss_ratio"]) > threshold
        reb = _events(fig9_result, "balanced", seed, "rebalanced")
        assert len(reb) == 1, seed

        bal = _series(ts, "balanced", seed, 1)
        violating = [r for r in bal if r[TS_WLOSS] > threshold]
        assert violating and trig[0][3] == violating[0][TS_REL], seed
        post = [r for r in bal if r[TS_REL] >= reb[0][3] + period_ms]
        assert len(post) >= 3, seed
        for r in post:
            assert r[TS_WLOSS] < threshold, (seed, r[TS_REL], r[TS_WLOSS])
            assert r[TS_WLAT] < target_us, (seed, r[TS_REL], r[TS_WLAT])

        assert not _events(fig9_result, "frozen", seed, "balance_triggered")
        frz = _series(ts, "frozen", seed, 1)
        assert all(r[TS_WLOSS] > threshold for r in frz), seed
        closs = [r[TS_CLOSS] for r in frz]
        clat = [r[TS_CLAT] for r in frz]
        assert closs[-1] > closs[0], seed
        assert clat[-1] > clat[0], seed
        for a, b in zip(closs, closs[1:]):
            assert b >= a - 2e-3, seed
        for a, b in zip(clat, clat[1:]):
            assert b >= a - 0.05, seed
    print("criterion 08 load balancing trigger: PASS")


# --- 9: reproducibility -------------------------------------------------------

def test_criterion_09_byte_identical_reruns(tmp_path):
    """Identical configuration and seed produce byte-identical exports:
    two independent executions of a bundled scenario write the same CSV
    bytes and the same manifest, hash for hash."""
    sc = bundled("fig5")
    digests_a = export(run_scenario(sc, seeds=(1,)), tmp_path / "a")
    digests_b = export(run_scenario(sc, seeds=(1,)), tmp_path / "b")
    assert digests_a == digests_b
    for name in sorted(digests_a):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes(), name
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()
    print("criterion 09 byte identical reruns: PASS")


# --- 10: equal-priority fairness ----------------------------------------------

def test_criterion_10_equal_priority_fairness():
    """Two equal-priority sources saturate the same switch output and
    contend every slot; over any window of 10_000 consecutive slots
    their grant counts differ by at most one."""
    grid, eng = make_engine(trace=True)
    in_port_of = {}
    is_key = None
    for slice_id, src in ((1, 1), (2, 2)):
        path = authorize_path(eng, grid, slice_id, src, 3, priority=2)
        is_key = grid.node_key(path.hops[1])
        in_port_of[src] = grid.switch_port_of(path.hops[1], path.hops[0])
        eng.sources.append(FrameSource(
            eng.tors[src], slice_id, src, {3: 1.0}, 1.0, 0.8,
            Random(70 + src), burst_frames=2.0))
    eng.run_until(26_000 * eng.params.slot_ns)

    emitted = {1: set(), 2: set()}
    for slot, tor, egress, _prio, _best in eng.trace_labels:
        if tor in emitted and egress == TOR_PORT_IS:
            emitted[tor].add(slot)
    start = max(min(emitted[1]), min(emitted[2]))
    last = min(max(emitted[1]), max(emitted[2]))
    span = range(start, last + 1)
    assert len(span) >= 20_000
    for tor, slots in emitted.items():
        assert all(s in slots for s in span), tor

    wins = [1 if in_port == in_port_of[1] else 0
            for slot, sw, _out, in_port in eng.trace_grants
            if sw == is_key and start <= slot <= last]
    assert len(wins) == len(span)
    prefix = [0]
    for w in wins:
        prefix.append(prefix[-1] + w)
    window = 10_000
    for i in range(len(wins) - window + 1):
        first = prefix[i + window] - prefix[i]
        assert abs(2 * first - window) <= 1, i
    print("criterion 10 equal priority fairness: PASS")
