"""Measurement plumbing: reservoir samples, quantile grids, CSV export.

Counters stay exact (plain ints and float sums on the devices); sampling
is only used for latency distributions. All exports format numbers
deterministically so identical runs produce byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
from array import array
from random import Random
from typing import Iterable, NamedTuple


class SliceMetrics(NamedTuple):
    """One slice's aggregated statistics for one polling window."""

    t_ns: int
    slice_id: int
    window_ns: int
    sent: int
    lost: int
    retransmitted: int
    loss_ratio: float
    mean_latency_ns: float


class Reservoir:
    """Uniform sample of a stream (algorithm R), fixed memory."""

    __slots__ = ("capacity", "seen", "_rng", "_buf")

    def __init__(self, capacity: int, rng: Random):
        self.capacity = capacity
        self.seen = 0
        self._rng = rng
        self._buf = array("d")

    def add(self, x: float):
        self.seen += 1
        if len(self._buf) < self.capacity:
            self._buf.append(x)
            return
        j = int(self._rng.random() * self.seen)
        if j < self.capacity:
            self._buf[j] = x

    def __len__(self) -> int:
        return len(self._buf)

    def values(self) -> list[float]:
        return list(self._buf)

    def quantile_grid(self, points: int = 200) -> list[tuple[float, float]]:
        """(quantile, value) pairs on an even grid including both ends."""
        if not self._buf:
            return []
        import numpy as np

        qs = [i / points for i in range(points + 1)]
        vs = np.quantile(np.frombuffer(self._buf, dtype="d"), qs)
        return list(zip(qs, (float(v) for v in vs)))


def fmt(x) -> str:
    """Canonical cell formatting for CSV output."""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_csv(path, header: list[str], rows: Iterable[tuple]):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(c) for c in row) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def write_manifest(path, config: dict, seeds: list[int], version: str,
                   files: dict[str, str]):
    doc = {
        "config_sha256": config_digest(config),
        "seeds": seeds,
        "version": version,
        "files": files,
    }
    with open(path, "w", newline="") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
