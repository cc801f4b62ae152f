import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spann.errors import CorruptionError, InvalidArgumentError
from spann.navigator import (
    CentroidTable,
    Strategy,
    build_navigator,
    default_ef,
    load_navigator,
    save_navigator,
    search_navigator,
)
from spann.vectors import distances


def table(n, dim=8, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    reps = rng.standard_normal((n, dim)).astype(dtype)
    return CentroidTable(reps, np.arange(n) * 3, np.arange(n))


def test_table_validation():
    with pytest.raises(InvalidArgumentError):
        CentroidTable(np.zeros((2, 2)), np.arange(2), np.array([0, 0]))
    with pytest.raises(InvalidArgumentError):
        CentroidTable(np.zeros((0, 2)), np.arange(0), np.arange(0))


def test_single_centroid():
    t = table(1)
    for strat in Strategy:
        idx = build_navigator(t, strat)
        out = search_navigator(idx, t, np.ones(8, np.float32), K=5)
        assert [lid for lid, _ in out] == [0]


def test_bad_degree():
    with pytest.raises(InvalidArgumentError):
        build_navigator(table(5), "graph", graph_degree=0)


def test_graph_construction_invariants():
    t = table(100, dim=2)
    idx = build_navigator(t, "graph", graph_degree=8)
    for v in range(100):
        nb = idx.neighbors(v)
        assert len(nb) <= 8
        assert v not in nb
        assert len(set(nb.tolist())) == len(nb)


def test_exact_query_on_representative():
    t = table(50)
    idx = build_navigator(t, "exact")
    out = search_navigator(idx, t, t.reps[17], K=3)
    assert out[0] == (17, 0.0)


def test_exact_full_sort_with_ties():
    reps = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [2, 0]], np.float32)
    t = CentroidTable(reps, np.arange(5), np.array([4, 2, 0, 3, 1]))
    idx = build_navigator(t, "exact")
    out = search_navigator(idx, t, np.zeros(2, np.float32), K=10)
    assert [lid for lid, _ in out] == [0, 2, 3, 4, 1]
    assert [d for _, d in out] == [1, 1, 1, 1, 4]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_exact_matches_bruteforce_sort(seed, K):
    t = table(40, seed=seed % 7)
    q = np.random.default_rng(seed).standard_normal(8).astype(np.float32)
    out = search_navigator(build_navigator(t, "exact"), t, q, K)
    d = distances(q, t.reps)
    expect = sorted(zip(t.list_ids.tolist(), d.tolist()), key=lambda p: (p[1], p[0]))[:K]
    assert out == expect


def test_graph_recall_vs_exact():
    t = table(500, dim=16, seed=1)
    g = build_navigator(t, "graph", graph_degree=16, seed=3)
    e = build_navigator(t, "exact")
    rng = np.random.default_rng(9)
    overlap = []
    for _ in range(100):
        q = rng.standard_normal(16).astype(np.float32)
        a = {lid for lid, _ in search_navigator(g, t, q, 10, ef=50)}
        b = {lid for lid, _ in search_navigator(e, t, q, 10)}
        overlap.append(len(a & b) / 10)
    assert np.mean(overlap) >= 0.95


def test_graph_output_sorted_unique():
    t = table(300, seed=2)
    g = build_navigator(t, "graph", graph_degree=12)
    q = np.random.default_rng(0).standard_normal(8).astype(np.float32)
    out = search_navigator(g, t, q, 20)
    keys = [(d, lid) for lid, d in out]
    assert keys == sorted(keys)
    assert len({lid for lid, _ in out}) == len(out)


def test_k_larger_than_n():
    t = table(6)
    out = search_navigator(build_navigator(t, "graph", graph_degree=3), t, t.reps[0], 50)
    assert len(out) == 6


def test_default_ef():
    assert default_ef(4) == 32 and default_ef(64) == 128


@pytest.mark.parametrize("strategy", ["exact", "graph"])
def test_save_load_round_trip(tmp_path, strategy):
    t = table(120, seed=4)
    idx = build_navigator(t, strategy, graph_degree=6)
    p = tmp_path / "navigator"
    save_navigator(p, idx, t)
    idx2, t2 = load_navigator(p)
    assert t2.reps.tobytes() == t.reps.tobytes()
    assert np.array_equal(t2.rep_ids, t.rep_ids)
    assert idx2.strategy is idx.strategy
    if strategy == "graph":
        for v in range(120):
            assert sorted(idx2.neighbors(v).tolist()) == sorted(idx.neighbors(v).tolist())
    q = t.reps[5]
    assert search_navigator(idx2, t2, q, 7) == search_navigator(idx, t, q, 7)


def test_load_detects_corruption(tmp_path):
    t = table(30)
    p = tmp_path / "navigator"
    save_navigator(p, build_navigator(t, "graph", graph_degree=4), t)
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_navigator(p)


def test_uint8_reps():
    t = table(40, dtype=np.float32)
    t = CentroidTable(np.abs(t.reps * 40).astype(np.uint8), t.rep_ids, t.list_ids)
    g = build_navigator(t, "graph", graph_degree=8)
    e = build_navigator(t, "exact")
    q = t.reps[3]
    assert search_navigator(g, t, q, 1)[0][0] == search_navigator(e, t, q, 1)[0][0] == 3
