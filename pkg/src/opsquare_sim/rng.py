"""Stable seed derivation for independent random streams.

Every stochastic component gets its own random.Random seeded from the
master seed plus a purpose tag, so adding or removing one consumer never
shifts the draws of another (paired-seed runs rely on this).
"""
from __future__ import annotations

import hashlib
import random

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 finalizer; avalanches all 64 bits."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _as_int(tag) -> int:
    if isinstance(tag, int):
        return tag & _MASK
    if isinstance(tag, str):
        return int.from_bytes(
            hashlib.blake2b(tag.encode(), digest_size=8).digest(), "big")
    raise TypeError(f"seed tag must be int or str, not {type(tag).__name__}")


def combine(*parts) -> int:
    acc = 0
    for p in parts:
        acc = mix64(acc ^ (_as_int(p) + _GOLDEN))
    return acc


def stream(master_seed: int, *tags) -> random.Random:
    return random.Random(combine(master_seed, *tags))
