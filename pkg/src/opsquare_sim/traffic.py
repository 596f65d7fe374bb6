"""Frame generation: per-slice sources with geometric idle gaps.

A source models one server worth of offered load on its rack's 10G link.
After each frame it draws an idle gap in bytes; the gap distribution is
geometric with mean sized so the long-run busy fraction equals `load`
exactly. Burstiness reuses the same machinery: with mean burst length B
frames, a burst continues back-to-back with probability 1 - 1/B and the
off gap mean is scaled by B, which leaves the offered load unchanged.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from random import Random

from .dataplane import Frame

_NEVER = float("inf")


class FrameSource:
    """Generates frames of one slice from one source ToR."""

    __slots__ = ("tor", "slice_id", "src", "next_ns", "rng", "_dsts", "_cum",
                 "_exit_p", "_off_mean", "_nspb", "_fmin", "_width")

    def __init__(self, tor, slice_id: int, src: int, dests: dict[int, float],
                 load: float, ns_per_byte: float, rng: Random,
                 burst_frames: float = 1.0, frame_min: int = 64,
                 frame_max: int = 1518, start_ns: int = 0):
        if not dests:
            raise ValueError("source needs at least one destination")
        if not 0.0 <= load <= 1.0:
            raise ValueError(f"load must be within [0, 1], got {load}")
        if burst_frames < 1.0:
            raise ValueError("mean burst length is at least one frame")
        self.tor = tor
        self.slice_id = slice_id
        self.src = src
        self.rng = rng
        self._nspb = ns_per_byte
        self._fmin = frame_min
        self._width = frame_max - frame_min + 1
        self._dsts = tuple(dests)
        total = float(sum(dests.values()))
        acc, cum = 0.0, []
        for w in dests.values():
            acc += w / total
            cum.append(acc)
        self._cum = cum
        mean_size = (frame_min + frame_max) / 2
        self._exit_p = 1.0 / burst_frames
        if load == 0.0:
            self.next_ns = _NEVER
            self._off_mean = _NEVER
            return
        self._off_mean = burst_frames * mean_size * (1.0 - load) / load
        self.next_ns = start_ns + self._gap() * ns_per_byte

    def _gap(self) -> int:
        mean = self._off_mean
        if self.rng.random() < self._exit_p:
            if mean <= 0.0:
                return 0
            p = 1.0 / (1.0 + mean)
            u = 1.0 - self.rng.random()
            return int(math.log(u) / math.log(1.0 - p))
        return 0

    def pump(self, until_ns):
        """Generate every frame with timestamp strictly before until_ns."""
        nxt = self.next_ns
        if nxt >= until_ns:
            return
        rng_random = self.rng.random
        accept = self.tor.accept_frame
        dsts, cum = self._dsts, self._cum
        one_dst = dsts[0] if len(dsts) == 1 else None
        fmin, width, nspb = self._fmin, self._width, self._nspb
        s, src = self.slice_id, self.src
        while nxt < until_ns:
            size = fmin + int(rng_random() * width)
            dst = one_dst if one_dst is not None else dsts[bisect_right(cum, rng_random())]
            accept(Frame(size, nxt, s, src, dst))
            nxt += (size + self._gap()) * nspb
        self.next_ns = nxt
