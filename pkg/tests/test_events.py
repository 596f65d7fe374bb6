from __future__ import annotations

import pytest

from opsquare_sim.errors import ProtocolViolation
from opsquare_sim.events import EventQueue
from opsquare_sim.rng import combine, mix64, stream


def test_events_run_in_time_then_insertion_order():
    q = EventQueue()
    log = []
    q.schedule(20, log.append, "b")
    q.schedule(10, log.append, "a1")
    q.schedule(10, log.append, "a2")
    q.schedule(30, log.append, "c")
    assert q.run_due(20) == 3
    assert log == ["a1", "a2", "b"]
    assert q.now == 20


def test_handler_may_chain_at_current_time():
    q = EventQueue()
    log = []

    def first():
        log.append("first")
        q.schedule(q.now, log.append, "chained")

    q.schedule(5, first)
    q.run_due(5)
    assert log == ["first", "chained"]


def test_scheduling_in_the_past_rejected():
    q = EventQueue()
    q.run_due(100)
    with pytest.raises(ProtocolViolation):
        q.schedule(99, lambda: None)
    with pytest.raises(ProtocolViolation):
        q.run_due(50)


def test_peek_time():
    q = EventQueue()
    assert q.peek_time() is None
    q.schedule(7, lambda: None)
    assert q.peek_time() == 7


def test_mix64_avalanches_and_is_stable():
    assert mix64(0) != mix64(1)
    assert mix64(12345) == mix64(12345)
    # regression pin so persisted artifacts stay comparable across versions
    assert combine(1, "traffic", 3) == combine(1, "traffic", 3)
    assert combine(1, "traffic", 3) != combine(1, "traffic", 4)
    assert combine(1, "traffic", 3) != combine(2, "traffic", 3)


def test_streams_are_independent():
    a1 = stream(42, "traffic", 1)
    a2 = stream(42, "traffic", 1)
    b = stream(42, "traffic", 2)
    xs1 = [a1.random() for _ in range(5)]
    xs2 = [a2.random() for _ in range(5)]
    ys = [b.random() for _ in range(5)]
    assert xs1 == xs2
    assert xs1 != ys
