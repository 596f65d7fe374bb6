"""Deterministic event scheduling on an integer-nanosecond clock.

Events fire in (time, insertion order); simultaneous events never race.
The slotted engine advances the clock slot by slot and drains everything
due at each boundary, so handlers may schedule follow-ups at the current
time and still run within the same boundary.
"""
from __future__ import annotations

import heapq
from typing import Callable

from .errors import ProtocolViolation


class EventQueue:
    __slots__ = ("_heap", "_seq", "now")

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, t_ns: int, fn: Callable, *args) -> None:
        if t_ns < self.now:
            raise ProtocolViolation(
                f"event scheduled at {t_ns} ns but clock is at {self.now} ns")
        heapq.heappush(self._heap, (t_ns, self._seq, fn, args))
        self._seq += 1

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run_due(self, t_ns: int) -> int:
        """Execute every event due at or before t_ns; returns count run."""
        if t_ns < self.now:
            raise ProtocolViolation("clock cannot move backwards")
        heap, n = self._heap, 0
        while heap and heap[0][0] <= t_ns:
            t, _, fn, args = heapq.heappop(heap)
            self.now = t
            fn(*args)
            n += 1
        self.now = t_ns
        return n
