from __future__ import annotations

import json

import pytest

from opsquare_sim.metrics import (
    Reservoir,
    config_digest,
    fmt,
    sha256_file,
    write_csv,
    write_manifest,
)
from opsquare_sim.rng import stream


def test_reservoir_keeps_everything_under_capacity():
    r = Reservoir(100, stream(1, "res"))
    for i in range(50):
        r.add(float(i))
    assert sorted(r.values()) == [float(i) for i in range(50)]
    assert r.seen == 50


def test_reservoir_caps_memory_and_samples_uniformly():
    r = Reservoir(2000, stream(1, "res"))
    n = 200_000
    for i in range(n):
        r.add(float(i))
    assert len(r) == 2000
    assert r.seen == n
    # a uniform sample of 0..n-1 has mean ~ n/2 (sigma ~ n/sqrt(12*2000))
    mean = sum(r.values()) / len(r)
    assert mean == pytest.approx(n / 2, rel=0.05)


def test_reservoir_is_deterministic_per_stream():
    a = Reservoir(64, stream(9, "res", 1))
    b = Reservoir(64, stream(9, "res", 1))
    for i in range(10_000):
        a.add(float(i % 977))
        b.add(float(i % 977))
    assert a.values() == b.values()


def test_quantile_grid_recovers_known_mixture():
    # half the mass uniform on [0,1), half on [10,11)
    r = Reservoir(50_000, stream(3, "res"))
    g = stream(4, "mix")
    for _ in range(50_000):
        r.add(g.random() + (10.0 if g.random() < 0.5 else 0.0))
    grid = dict(r.quantile_grid(100))
    assert grid[0.25] == pytest.approx(0.5, abs=0.1)
    assert grid[0.75] == pytest.approx(10.5, abs=0.1)
    values = [v for _, v in sorted(grid.items())]
    assert values == sorted(values)


def test_quantile_grid_empty():
    assert Reservoir(10, stream(1, "r")).quantile_grid() == []


def test_fmt_is_stable():
    assert fmt(3) == "3"
    assert fmt(0.5) == "0.5"
    assert fmt(1583.5) == "1583.5"
    assert fmt(1e-5) == "1e-05"
    assert fmt("x") == "x"


def test_write_csv_bytes_are_reproducible(tmp_path):
    rows = [(1, 0.25, "a"), (2, 1583.5, "b")]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(p1, ["n", "v", "tag"], rows)
    write_csv(p2, ["n", "v", "tag"], rows)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text() == "n,v,tag\n1,0.25,a\n2,1583.5,b\n"
    assert sha256_file(p1) == sha256_file(p2)


def test_config_digest_order_independent():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_manifest_round_trip(tmp_path):
    p = tmp_path / "manifest.json"
    write_manifest(p, {"x": 1}, seeds=[1, 2], version="0.1.0",
                   files={"sweep.csv": "ab" * 32})
    doc = json.loads(p.read_text())
    assert doc["seeds"] == [1, 2]
    assert doc["config_sha256"] == config_digest({"x": 1})
    assert doc["files"]["sweep.csv"] == "ab" * 32
